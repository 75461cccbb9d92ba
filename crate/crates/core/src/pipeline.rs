//! End-to-end driver shared by the command line and the integration tests.
//!
//! ```text
//! <run>/ckpt/      radiance.ckpt, objects.ckpt
//! <run>/renders/   images, label maps, probability grids
//! <run>/metrics/   metrics.toml, report.txt
//! <run>/log/       radiance.jsonl, objects.jsonl, config.toml
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{Frame, SceneDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_view, MetricReport};
use crate::fields::{ObjectField, RadianceField};
use crate::losses::LossReport;
use crate::render::{render_image, FieldSource};
use crate::train::{held_out_psnr, Checkpoint, ObjectTrainer, RadianceTrainer};

pub const RADIANCE_CKPT: &str = "radiance.ckpt";
pub const OBJECTS_CKPT: &str = "objects.ckpt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["ckpt", "renders", "metrics", "log"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(name)
    }

    pub fn renders(&self) -> PathBuf {
        self.root.join("renders")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("log").join(name)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.log("config.toml");
        std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
    }

    pub fn write_metrics(&self, report: &MetricReport) -> Result<()> {
        let kv = self.metrics().join("metrics.toml");
        std::fs::write(&kv, report.to_key_value()).map_err(|e| Error::io(&kv, e))?;
        let txt = self.metrics().join("report.txt");
        std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// Appends loss reports as JSON lines.
pub struct LossLog {
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            file: Some(std::io::BufWriter::new(f)),
        })
    }

    pub fn discard() -> Self {
        LossLog { file: None }
    }

    pub fn record(&mut self, r: &LossReport) {
        if let Some(f) = &mut self.file {
            // A failed log line is not worth aborting training over.
            let _ = writeln!(f, "{}", r.to_json_line());
        }
    }
}

/// Views used for held-out scores: the test split, or every view when it is empty.
pub fn held_out_frames(dataset: &SceneDataset) -> Vec<&Frame> {
    let test: Vec<&Frame> = dataset.test_frames().collect();
    if test.is_empty() {
        dataset.frames.iter().collect()
    } else {
        test
    }
}

/// PSNR of the pooled squared error over the held-out views.
pub fn pooled_psnr(field: &RadianceField<f32>, dataset: &SceneDataset, cfg: &RunConfig) -> Result<f64> {
    let mut sampling = cfg.sampling.clone();
    sampling.background = dataset.background;
    let frames = held_out_frames(dataset);
    let mut mse = 0.0;
    for f in &frames {
        mse += 10f64.powf(-held_out_psnr(field, f, &sampling)? / 10.0);
    }
    Ok(-10.0 * (mse / frames.len() as f64).log10())
}

/// Runs (or continues) stage 1 to the configured iteration count.
pub fn train_radiance(dataset: &SceneDataset, cfg: &RunConfig, resume: Option<&Checkpoint>, mut log: impl FnMut(&LossReport)) -> Result<RadianceTrainer> {
    let mut t = match resume {
        Some(c) => RadianceTrainer::resume(
            dataset,
            c.radiance_field()?,
            c.radiance_adam()?,
            c.meta.stage1_iteration,
            cfg.train.clone(),
            cfg.sampling.clone(),
            cfg.loss,
        )?,
        None => RadianceTrainer::new(dataset, cfg.radiance.clone(), cfg.train.clone(), cfg.sampling.clone(), cfg.loss)?,
    };
    t.run(&mut log)?;
    Ok(t)
}

/// Runs (or continues) stage 2 on top of a frozen radiance field.
pub fn train_objects(
    dataset: &SceneDataset,
    radiance: &RadianceField<f32>,
    cfg: &RunConfig,
    resume: Option<&Checkpoint>,
    mut log: impl FnMut(&LossReport),
) -> Result<ObjectTrainer> {
    let caches = ObjectTrainer::build_caches(dataset, radiance, &cfg.sampling, &cfg.postprocess, cfg.train.cache_weight_threshold)?;
    let mut t = match resume {
        Some(c) if c.has_objects() => ObjectTrainer::resume(caches, c.object_field()?, c.object_adam()?, c.meta.stage2_iteration, cfg.train.clone(), cfg.loss)?,
        _ => ObjectTrainer::new(caches, cfg.objects.clone(), cfg.train.clone(), cfg.loss)?,
    };
    t.run(&mut log)?;
    Ok(t)
}

/// Segmentation metrics over the held-out views that have ground-truth labels.
pub fn evaluate(dataset: &SceneDataset, radiance: &RadianceField<f32>, objects: &ObjectField<f32>, cfg: &RunConfig) -> Result<MetricReport> {
    let mut sampling = cfg.sampling.deterministic();
    sampling.background = dataset.background;
    let source = FieldSource::new(radiance, Some(objects));
    let mut views = Vec::new();
    for f in held_out_frames(dataset) {
        let Some(gt) = dataset.labels.get(&f.view_id) else { continue };
        let (_, probs) = render_image(&f.camera, &source, &sampling, 0)?;
        views.push(evaluate_view(&f.view_id, &probs, gt, &cfg.eval)?);
    }
    if views.is_empty() {
        return Err(Error::Data("no held-out view has ground-truth labels".into()));
    }
    MetricReport::from_views(views)
}

pub struct PipelineOutcome {
    pub psnr: f64,
    pub report: MetricReport,
    pub checkpoint: Checkpoint,
}

/// Both stages and evaluation, reusing a stage-1 checkpoint when one is given.
pub fn run_pipeline(dataset: &SceneDataset, cfg: &RunConfig, stage1: Option<&Checkpoint>, run: Option<&RunDir>) -> Result<PipelineOutcome> {
    let mut rlog = match run {
        Some(r) => LossLog::create(&r.log("radiance.jsonl"))?,
        None => LossLog::discard(),
    };
    let rt = train_radiance(dataset, cfg, stage1, |r| rlog.record(r))?;
    let psnr = pooled_psnr(&rt.field, dataset, cfg)?;
    let mut olog = match run {
        Some(r) => LossLog::create(&r.log("objects.jsonl"))?,
        None => LossLog::discard(),
    };
    let ot = train_objects(dataset, &rt.field, cfg, None, |r| olog.record(r))?;
    let report = evaluate(dataset, &rt.field, &ot.field, cfg)?;
    let checkpoint = Checkpoint::from_radiance(&rt).with_objects(&ot);
    if let Some(r) = run {
        r.write_config(cfg)?;
        checkpoint.save(&r.ckpt(OBJECTS_CKPT))?;
        r.write_metrics(&report)?;
    }
    Ok(PipelineOutcome { psnr, report, checkpoint })
}
