use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use seglift::config::{Preset, RunConfig};
use seglift::dataset::{Frame, SceneDataset};
use seglift::error::{Error, Result};
use seglift::eval::{confidence_map, segment};
use seglift::fields::{ObjectField, RadianceField};
use seglift::image::{write_float_grid, write_gray_png, write_label_png, write_rgb_png, FloatGrid};
use seglift::object_ops::{compose, recolor, render_selected, ColorMap, Composition, EditedSource, SceneFile, SceneInstance, SlotSelector};
use seglift::pipeline::{evaluate, held_out_frames, pooled_psnr, train_objects, train_radiance, LossLog, RunDir, OBJECTS_CKPT, RADIANCE_CKPT};
use seglift::render::{render_image, FieldSource};
use seglift::synthetic::{emit_dataset, AnalyticScene};
use seglift::train::{Checkpoint, MatchingMode};

#[derive(Parser)]
#[command(name = "seglift", version, about = "Lift inconsistent per-view instance masks into a 3D object field")]
struct Cli {
    /// Random seed (training, corruption and sampling)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML configuration file; command-line flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset the configuration is merged over [default: published]
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Published,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the synthetic multi-object scene as a dataset
    Synth(SynthArgs),
    /// Stage 1: fit the radiance field
    TrainNerf(TrainArgs),
    /// Stage 2: fit the object field with the radiance field frozen (N = 2 x K_max slots)
    TrainObjects(TrainArgs),
    /// Render colour, depth and slot probabilities
    Render(ViewArgs),
    /// Per-pixel slot labels and confidence maps
    Segment(ViewArgs),
    /// Score segmentations against ground-truth label maps
    Eval(ViewArgs),
    /// Render only the selected slots
    Extract(EditArgs),
    /// Recolour the selected slots
    Edit(EditArgs),
    /// Render several trained models together
    Compose(ComposeArgs),
    /// Re-run stage 2 without matching and/or without the TV term, and compare
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Training views
    #[arg(long, default_value_t = 30)]
    views: usize,
    /// Held-out views
    #[arg(long, default_value_t = 5)]
    test_views: usize,
    /// Image side length in pixels
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Probability of dropping each mask
    #[arg(long, default_value_t = 0.2)]
    drop: f64,
    /// Probability of splitting each mask in two
    #[arg(long, default_value_t = 0.3)]
    split: f64,
    /// Probability of merging touching masks
    #[arg(long, default_value_t = 0.0)]
    merge: f64,
    /// Maximum boundary jitter in pixels
    #[arg(long, default_value_t = 2)]
    jitter: usize,
}

#[derive(Args)]
struct DataRun {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Run directory (ckpt/, renders/, metrics/, log/)
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    io: DataRun,
    /// Continue from the checkpoint in the run directory
    #[arg(long)]
    resume: bool,
    /// Stage-1 iterations [published default: 10000]
    #[arg(long)]
    stage1_iters: Option<usize>,
    /// Rays per stage-1 batch [default: 4096]
    #[arg(long)]
    rays: Option<usize>,
    /// Stage-1 learning rate [default: 1e-2]
    #[arg(long)]
    lr_stage1: Option<f64>,
    /// Initially active hash-grid levels [published default: 4, +1 every 50 iterations up to 16]
    #[arg(long)]
    c2f_start: Option<usize>,
    /// Iterations between level activations [published default: 50]
    #[arg(long)]
    c2f_every: Option<usize>,
    /// Stage-2 iterations [published default: 2000]
    #[arg(long)]
    stage2_iters: Option<usize>,
    /// Views per stage-2 batch [published default: B = 5]
    #[arg(long)]
    batch_views: Option<usize>,
    /// Stage-2 learning rate [published default: 0.15]
    #[arg(long)]
    lr_stage2: Option<f64>,
    /// Stage-2 warm-up iterations [published default: 20]
    #[arg(long)]
    warmup: Option<usize>,
    /// Stage-2 per-iteration decay after warm-up [published default: 0.005]
    #[arg(long)]
    lr_decay: Option<f64>,
    /// False-positive loss weight [published default: 0.01]
    #[arg(long)]
    lambda_fp: Option<f64>,
    /// Total-variation weight [published default: 0.01]
    #[arg(long)]
    lambda_tv: Option<f64>,
    /// Empty-space density weight [published default: 1e-4]
    #[arg(long)]
    lambda_empty: Option<f64>,
    /// Assign masks by independent argmax instead of optimal matching
    #[arg(long)]
    no_matching: bool,
    /// Disable the total-variation term
    #[arg(long)]
    no_tv: bool,
}

#[derive(Args)]
struct ViewArgs {
    #[command(flatten)]
    io: DataRun,
    /// View ids [default: held-out views]
    #[arg(long, value_delimiter = ',')]
    views: Vec<String>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Slot ids (1-based, as in label maps)
    #[arg(long, value_delimiter = ',', required = true)]
    slots: Vec<u32>,
    /// Gate density by selected probability mass instead of argmax
    #[arg(long)]
    soft: bool,
    /// Row-major 3x3 colour matrix followed by 3 offsets (12 numbers) [default: zero map]
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    color: Option<Vec<f64>>,
}

#[derive(Args)]
struct ComposeArgs {
    /// Scene file listing `[[instance]]` tables
    #[arg(long)]
    scene: PathBuf,
    /// Dataset whose cameras are used
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// View ids [default: held-out views]
    #[arg(long, value_delimiter = ',')]
    views: Vec<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    io: DataRun,
    /// Run the variant without optimal matching
    #[arg(long)]
    no_matching: bool,
    /// Run the variant without the total-variation term
    #[arg(long)]
    no_tv: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let preset = cli.preset.map(|p| match p {
        PresetArg::Published => Preset::Published,
        PresetArg::Desk => Preset::Desk,
    });
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, preset)?,
        None => RunConfig::preset(preset.unwrap_or_default()),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.corruption.seed = s;
    }
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::TrainNerf(a) => train_nerf(cfg, a),
        Command::TrainObjects(a) => train_objects_cmd(cfg, a),
        Command::Render(a) => render_cmd(cfg, a),
        Command::Segment(a) => segment_cmd(cfg, a),
        Command::Eval(a) => eval_cmd(cfg, a),
        Command::Extract(a) => edit_cmd(cfg, a, false),
        Command::Edit(a) => edit_cmd(cfg, a, true),
        Command::Compose(a) => compose_cmd(cfg, a),
        Command::Ablate(a) => ablate(cfg, a),
    }
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    cfg.rig.train_views = a.views;
    cfg.rig.test_views = a.test_views;
    cfg.rig.resolution = a.res;
    cfg.corruption.drop_prob = a.drop;
    cfg.corruption.split_prob = a.split;
    cfg.corruption.merge_prob = a.merge;
    cfg.corruption.jitter_px = a.jitter;
    cfg.validate()?;
    let ds = emit_dataset(&AnalyticScene::default_scene(), &cfg.rig, &cfg.corruption, &a.out)?;
    info!("wrote {} views to {}", ds.frames.len(), a.out.display());
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(t.stage1_iters, a.stage1_iters);
    set!(t.stage1_rays_per_batch, a.rays);
    set!(t.lr_stage1, a.lr_stage1);
    set!(t.coarse2fine.start_levels, a.c2f_start);
    set!(t.coarse2fine.every, a.c2f_every);
    set!(t.stage2_iters, a.stage2_iters);
    set!(t.stage2_batch_views, a.batch_views);
    set!(t.lr_stage2, a.lr_stage2);
    set!(t.warmup_iters, a.warmup);
    set!(t.lr_decay, a.lr_decay);
    set!(cfg.loss.lambda_fp, a.lambda_fp);
    set!(cfg.loss.lambda_tv, a.lambda_tv);
    set!(cfg.loss.lambda_empty, a.lambda_empty);
    if a.no_matching {
        cfg.train.matching = MatchingMode::Argmax;
    }
    if a.no_tv {
        cfg.loss.lambda_tv = 0.0;
    }
    cfg.validate()
}

fn open(io: &DataRun) -> Result<(SceneDataset, RunDir)> {
    let ds = SceneDataset::load(&io.data)?;
    let run = RunDir::create(&io.run)?;
    Ok((ds, run))
}

fn train_nerf(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    apply_train_flags(&mut cfg, &a)?;
    let (ds, run) = open(&a.io)?;
    run.write_config(&cfg)?;
    let resume = if a.resume { Some(Checkpoint::load(&run.ckpt(RADIANCE_CKPT))?) } else { None };
    let mut log = LossLog::create(&run.log("radiance.jsonl"))?;
    let every = (cfg.train.stage1_iters / 20).max(1);
    let result = train_radiance(&ds, &cfg, resume.as_ref(), |r| {
        log.record(r);
        if r.iteration % every == 0 {
            info!("stage 1 iteration {} loss {:.5}", r.iteration, r.total);
        }
    });
    let t = result?;
    Checkpoint::from_radiance(&t).save(&run.ckpt(RADIANCE_CKPT))?;
    info!("held-out PSNR {:.2} dB", pooled_psnr(&t.field, &ds, &cfg)?);
    Ok(())
}

fn train_objects_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    apply_train_flags(&mut cfg, &a)?;
    let (ds, run) = open(&a.io)?;
    run.write_config(&cfg)?;
    let base = Checkpoint::load(&run.ckpt(RADIANCE_CKPT))?;
    let resume = if a.resume { Some(Checkpoint::load(&run.ckpt(OBJECTS_CKPT))?) } else { None };
    let radiance = base.radiance_field()?;
    let mut log = LossLog::create(&run.log("objects.jsonl"))?;
    let every = (cfg.train.stage2_iters / 20).max(1);
    let t = train_objects(&ds, &radiance, &cfg, resume.as_ref(), |r| {
        log.record(r);
        if r.iteration % every == 0 {
            info!("stage 2 iteration {} loss {:.5}", r.iteration, r.total);
        }
    })?;
    info!("{} slots for at most {} masks per view", t.budget.num_slots, t.budget.k_max);
    base.with_objects(&t).save(&run.ckpt(OBJECTS_CKPT))
}

struct Model {
    radiance: RadianceField<f32>,
    objects: Option<ObjectField<f32>>,
}

fn load_model(path_dir: &RunDir) -> Result<Model> {
    let p = path_dir.ckpt(OBJECTS_CKPT);
    let ck = if p.exists() { Checkpoint::load(&p)? } else { Checkpoint::load(&path_dir.ckpt(RADIANCE_CKPT))? };
    Ok(Model {
        radiance: ck.radiance_field()?,
        objects: if ck.has_objects() { Some(ck.object_field()?) } else { None },
    })
}

fn require_objects(m: &Model) -> Result<&ObjectField<f32>> {
    m.objects.as_ref().ok_or_else(|| Error::Data("run has no object field; run train-objects first".into()))
}

fn pick_views<'a>(ds: &'a SceneDataset, ids: &[String]) -> Result<Vec<&'a Frame>> {
    if ids.is_empty() {
        return Ok(held_out_frames(ds));
    }
    ids.iter()
        .map(|id| ds.frame(id).ok_or_else(|| Error::Data(format!("unknown view `{id}`"))))
        .collect()
}

fn render_cmd(cfg: RunConfig, a: ViewArgs) -> Result<()> {
    let (ds, run) = open(&a.io)?;
    let m = load_model(&run)?;
    let source = FieldSource::new(&m.radiance, m.objects.as_ref());
    let mut sampling = cfg.sampling.deterministic();
    sampling.background = ds.background;
    for f in pick_views(&ds, &a.views)? {
        let (img, probs) = render_image(&f.camera, &source, &sampling, 0)?;
        let dir = run.renders();
        write_rgb_png(&dir.join(format!("{}.png", f.view_id)), &img)?;
        let far = probs.depth.iter().copied().fold(1e-9, f64::max);
        let depth: Vec<f32> = probs.depth.iter().map(|d| (d / far) as f32).collect();
        write_gray_png(&dir.join(format!("{}_depth.png", f.view_id)), f.camera.width, f.camera.height, &depth)?;
        write_float_grid(&dir.join(format!("{}_probs.slfg", f.view_id)), &FloatGrid::from_probabilities(&probs))?;
        info!("rendered {}", f.view_id);
    }
    Ok(())
}

fn segment_cmd(cfg: RunConfig, a: ViewArgs) -> Result<()> {
    let (ds, run) = open(&a.io)?;
    let m = load_model(&run)?;
    let objects = require_objects(&m)?;
    let source = FieldSource::new(&m.radiance, Some(objects));
    let mut sampling = cfg.sampling.deterministic();
    sampling.background = ds.background;
    for f in pick_views(&ds, &a.views)? {
        let (_, probs) = render_image(&f.camera, &source, &sampling, 0)?;
        let dir = run.renders();
        write_label_png(&dir.join(format!("{}_labels.png", f.view_id)), &segment(&probs))?;
        let conf: Vec<f32> = confidence_map(&probs).iter().map(|c| *c as f32).collect();
        write_gray_png(&dir.join(format!("{}_confidence.png", f.view_id)), probs.width, probs.height, &conf)?;
    }
    Ok(())
}

fn eval_cmd(cfg: RunConfig, a: ViewArgs) -> Result<()> {
    let (mut ds, run) = open(&a.io)?;
    let m = load_model(&run)?;
    let objects = require_objects(&m)?;
    if !a.views.is_empty() {
        let keep: Vec<String> = pick_views(&ds, &a.views)?.iter().map(|f| f.view_id.clone()).collect();
        ds.labels.retain(|k, _| keep.contains(k));
    }
    let report = evaluate(&ds, &m.radiance, objects, &cfg)?;
    run.write_metrics(&report)?;
    print!("{}", report.to_key_value());
    Ok(())
}

fn edit_cmd(cfg: RunConfig, a: EditArgs, recolour: bool) -> Result<()> {
    let (ds, run) = open(&a.view.io)?;
    let m = load_model(&run)?;
    let objects = require_objects(&m)?;
    let source = FieldSource::new(&m.radiance, Some(objects));
    let mut sel = SlotSelector::new(a.slots.iter().copied());
    if a.soft {
        sel = sel.soft();
    }
    let map = match &a.color {
        Some(v) if v.len() != 12 => return Err(Error::Config(format!("--color takes 12 numbers, got {}", v.len()))),
        Some(v) => ColorMap {
            matrix: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
            offset: [v[9], v[10], v[11]],
        },
        None => ColorMap::zero(),
    };
    let mut sampling = cfg.sampling.clone();
    sampling.background = ds.background;
    for f in pick_views(&ds, &a.view.views)? {
        let (img, name) = if recolour {
            (recolor(&f.camera, &source, &sel, &map, &sampling)?, format!("edit_{}.png", f.view_id))
        } else {
            (render_selected(&f.camera, &source, &sel, &sampling)?.0, format!("extract_{}.png", f.view_id))
        };
        write_rgb_png(&run.renders().join(name), &img)?;
    }
    Ok(())
}

fn compose_cmd(cfg: RunConfig, a: ComposeArgs) -> Result<()> {
    let scene = SceneFile::load(&a.scene)?;
    let ds = SceneDataset::load(&a.data)?;
    let models: Vec<Model> = scene
        .instances
        .iter()
        .map(|i| {
            let ck = Checkpoint::load(&i.checkpoint)?;
            Ok(Model {
                radiance: ck.radiance_field()?,
                objects: if ck.has_objects() { Some(ck.object_field()?) } else { None },
            })
        })
        .collect::<Result<_>>()?;
    let sources: Vec<FieldSource<'_, f32>> = models.iter().map(|m| FieldSource::new(&m.radiance, m.objects.as_ref())).collect();
    let instances = scene
        .instances
        .iter()
        .zip(&sources)
        .map(|(spec, src)| {
            let n = src.objects.map(|(o, _)| o.num_slots).unwrap_or(0);
            let mut edited = EditedSource::new(src);
            if n > 0 && spec.slots.is_some() {
                edited = edited.select(spec.selector(n));
            } else if spec.slots.is_some() {
                return Err(Error::Config(format!("{}: slot selection needs an object field", spec.checkpoint.display())));
            }
            if let Some(map) = spec.color_map {
                edited = edited.recolor(spec.selector(n.max(1)), map);
            }
            Ok(SceneInstance {
                source: edited,
                transform: spec.transform(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let comp = Composition { instances };
    let mut sampling = cfg.sampling.clone();
    sampling.background = ds.background;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for f in pick_views(&ds, &a.views)? {
        let img = compose(&comp, &f.camera, &sampling)?;
        write_rgb_png(&a.out.join(format!("compose_{}.png", f.view_id)), &img)?;
    }
    Ok(())
}

fn ablate(cfg: RunConfig, a: AblateArgs) -> Result<()> {
    let (ds, run) = open(&a.io)?;
    let radiance = Checkpoint::load(&run.ckpt(RADIANCE_CKPT))?.radiance_field()?;
    let (both, mut variants) = (!a.no_matching && !a.no_tv, vec![("default", cfg.clone())]);
    if a.no_matching || both {
        let mut c = cfg.clone();
        c.train.matching = MatchingMode::Argmax;
        variants.push(("no_matching", c));
    }
    if a.no_tv || both {
        let mut c = cfg.clone();
        c.loss.lambda_tv = 0.0;
        variants.push(("no_tv", c));
    }
    let mut summary = String::new();
    for (name, c) in variants {
        let t = train_objects(&ds, &radiance, &c, None, |_| {})?;
        let report = evaluate(&ds, &radiance, &t.field, &c)?;
        let dir = run.metrics().join(format!("ablate_{name}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join("metrics.toml"), &report.to_key_value())?;
        write_file(&dir.join("report.txt"), &report.to_text())?;
        summary.push_str(&format!("[{name}]\n{}\n", report.to_key_value()));
        info!("{name}: weighted IoU {:.4}", report.weighted_iou);
    }
    write_file(&run.metrics().join("ablation.toml"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
