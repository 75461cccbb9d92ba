use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Frame, SceneDataset};
use crate::error::{Error, Result};
use crate::fields::{RadianceConfig, RadianceField};
use crate::geometry::{generate_ray, Ray};
use crate::hash_grid::LevelMask;
use crate::image::psnr;
use crate::losses::{empty_space_loss, LossReport, LossWeights};
use crate::optim::Adam;
use crate::real::Real;
use crate::render::{composite, composite_backward, place_samples, render_image, FieldSource, Intervals, SamplingConfig};
use crate::seed::{derive_seed, rng_for};

use super::{TrainConfig, STAGE_RADIANCE};

/// Every pixel ray of the training views, with its target colour.
pub fn training_rays(dataset: &SceneDataset, sampling: &SamplingConfig) -> Result<(Vec<Ray>, Vec<[f32; 3]>)> {
    let mut rays = Vec::new();
    let mut targets = Vec::new();
    for f in dataset.train_frames() {
        let (w, h) = (f.camera.width, f.camera.height);
        for i in 0..w * h {
            rays.push(generate_ray(&f.camera, i / w, i % w, &sampling.bounds)?);
            targets.push(f.image.pixel(i / w, i % w));
        }
    }
    Ok((rays, targets))
}

struct ChunkGrad<T> {
    loss: f64,
    mlp_grad: Vec<T>,
    points: Vec<[T; 3]>,
    d_enc: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn rgb_chunk<T: Real>(
    field: &RadianceField<T>,
    mask: LevelMask,
    rays: &[Ray],
    targets: &[[f32; 3]],
    intervals: &[Intervals],
    background: [f64; 3],
    inv_rays: f64,
    want_grad: bool,
) -> ChunkGrad<T> {
    let mut world = Vec::new();
    let mut dirs = Vec::new();
    for (r, iv) in rays.iter().zip(intervals) {
        for t in &iv.t {
            world.push(r.at(*t));
            dirs.push(r.direction.0.map(T::lit));
        }
    }
    let points = field.contract_points(&world);
    let tape = field.forward(&points, &dirs, mask);
    let mut d_sigma = Vec::with_capacity(if want_grad { points.len() } else { 0 });
    let mut d_color = Vec::with_capacity(if want_grad { points.len() * 3 } else { 0 });
    let mut loss = 0.0;
    let mut start = 0;
    for ((iv, target), _) in intervals.iter().zip(targets).zip(rays) {
        let s = iv.len();
        let sigma: Vec<f64> = tape.sigma[start..start + s].iter().map(|v| v.as_f64()).collect();
        let delta = iv.deltas();
        let comp = composite(&sigma, &delta);
        let col = |i: usize, c: usize| tape.color_out[(start + i) * 3 + c].as_f64();
        let exit = comp.final_transmittance();
        let mut g = [0.0; 3];
        for c in 0..3 {
            let v: f64 = (0..s).map(|i| comp.weights[i] * col(i, c)).sum::<f64>() + exit * background[c];
            let d = v - target[c] as f64;
            loss += d * d;
            g[c] = 2.0 * d * inv_rays;
        }
        if want_grad {
            let per_sample: Vec<f64> = (0..s).map(|i| (0..3).map(|c| g[c] * col(i, c)).sum()).collect();
            let tail: f64 = (0..3).map(|c| g[c] * background[c]).sum();
            d_sigma.extend(composite_backward(&delta, &comp, &per_sample, tail).into_iter().map(T::lit));
            for w in &comp.weights {
                d_color.extend(g.map(|gc| T::lit(w * gc)));
            }
        }
        start += s;
    }
    if !want_grad {
        return ChunkGrad { loss, mlp_grad: Vec::new(), points: Vec::new(), d_enc: Vec::new() };
    }
    let mut mlp_grad = vec![T::zero(); field.mlp_param_count()];
    let d_enc = field.backward_mlps(&tape, &d_sigma, &d_color, &mut mlp_grad);
    ChunkGrad { loss, mlp_grad, points, d_enc }
}

/// Mean over rays of the squared colour error with the given sample placement, adding its
/// gradient to `grad` when present.
///
/// Chunks of `chunk` rays are evaluated in parallel and reduced in chunk order.
#[allow(clippy::too_many_arguments)]
pub fn rgb_objective<T: Real>(
    field: &RadianceField<T>,
    mask: LevelMask,
    rays: &[Ray],
    targets: &[[f32; 3]],
    intervals: &[Intervals],
    background: [f64; 3],
    chunk: usize,
    grad: Option<&mut [T]>,
) -> f64 {
    let n = rays.len();
    if n == 0 {
        return 0.0;
    }
    let chunk = chunk.max(1);
    let inv = 1.0 / n as f64;
    let want = grad.is_some();
    let parts: Vec<ChunkGrad<T>> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let r = c * chunk..((c + 1) * chunk).min(n);
            rgb_chunk(field, mask, &rays[r.clone()], &targets[r.clone()], &intervals[r], background, inv, want)
        })
        .collect();
    if let Some(grad) = grad {
        let g = field.grid.param_count();
        for p in &parts {
            for (a, b) in grad[g..].iter_mut().zip(&p.mlp_grad) {
                *a += *b;
            }
            field.scatter_grid_gradient(grad, &p.points, mask, &p.d_enc);
        }
    }
    parts.iter().map(|p| p.loss).sum::<f64>() * inv
}

/// PSNR of a deterministic render of `frame` against its image.
pub fn held_out_psnr(field: &RadianceField<f32>, frame: &Frame, sampling: &SamplingConfig) -> Result<f64> {
    let (img, _) = render_image(&frame.camera, &FieldSource::new(field, None), &sampling.deterministic(), 0)?;
    psnr(&img.data, &frame.image.data)
}

/// Stage-1 optimiser state.
pub struct RadianceTrainer {
    pub field: RadianceField<f32>,
    pub adam: Adam<f32>,
    /// Completed iterations.
    pub iteration: usize,
    pub config: TrainConfig,
    pub sampling: SamplingConfig,
    pub weights: LossWeights,
    rays: Vec<Ray>,
    targets: Vec<[f32; 3]>,
}

impl RadianceTrainer {
    pub fn new(
        dataset: &SceneDataset,
        radiance: RadianceConfig,
        config: TrainConfig,
        sampling: SamplingConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        let mut rng = rng_for(&[config.seed, STAGE_RADIANCE, u64::MAX]);
        let field = RadianceField::new(radiance, &mut rng)?;
        let adam = Adam::new(config.adam, field.param_count());
        Self::resume(dataset, field, adam, 0, config, sampling, weights)
    }

    /// Continues from saved state; `iteration` is the number of completed iterations.
    pub fn resume(
        dataset: &SceneDataset,
        field: RadianceField<f32>,
        adam: Adam<f32>,
        iteration: usize,
        config: TrainConfig,
        mut sampling: SamplingConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        sampling.background = dataset.background;
        sampling.validate()?;
        if dataset.train_frames().count() < 2 {
            return Err(Error::Data("radiance training needs at least 2 training views".into()));
        }
        if adam.m.len() != field.param_count() {
            return Err(Error::Data("optimizer state does not match the radiance field".into()));
        }
        let (rays, targets) = training_rays(dataset, &sampling)?;
        Ok(RadianceTrainer {
            field,
            adam,
            iteration,
            config,
            sampling,
            weights,
            rays,
            targets,
        })
    }

    pub fn level_mask(&self) -> LevelMask {
        let total = self.field.config.grid.num_levels;
        LevelMask::new(self.config.coarse2fine.active_levels(self.iteration, total), &self.field.grid).expect("level count within grid")
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.lr_stage1 * (1.0 - self.config.stage1_lr_decay).powi(self.iteration as i32)
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.stage1_iters
    }

    /// One optimiser step. On a non-finite loss or gradient the parameters are left at their
    /// last finite values and a divergence error is returned.
    pub fn step(&mut self) -> Result<LossReport> {
        let it = self.iteration as u64;
        let seed = self.config.seed;
        let b = self.config.stage1_rays_per_batch;
        let mut rng = rng_for(&[seed, STAGE_RADIANCE, it]);
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.rays.len())).collect();
        let rays: Vec<Ray> = idx.iter().map(|i| self.rays[*i]).collect();
        let targets: Vec<[f32; 3]> = idx.iter().map(|i| self.targets[*i]).collect();
        let mask = self.level_mask();
        let source = FieldSource {
            radiance: &self.field,
            radiance_mask: mask,
            objects: None,
        };
        let chunk = self.config.chunk_rays;
        let mut rngs: Vec<ChaCha8Rng> = (0..b as u64).map(|i| rng_for(&[seed, STAGE_RADIANCE, it, i])).collect();
        let intervals: Vec<Intervals> = rays
            .par_chunks(chunk)
            .zip(rngs.par_chunks_mut(chunk))
            .map(|(r, g)| place_samples(r, &source, &self.sampling, g))
            .collect::<Vec<_>>()
            .concat();
        let mut grad = vec![0.0f32; self.field.param_count()];
        let rgb = rgb_objective(&self.field, mask, &rays, &targets, &intervals, self.sampling.background, chunk, Some(&mut grad));
        let lambda = self.weights.lambda_empty;
        let empty = if lambda > 0.0 {
            let s = derive_seed(&[seed, STAGE_RADIANCE, it, 0xE4]);
            empty_space_loss(&self.field, mask, self.config.empty_space_points, s, Some((&mut grad, lambda as f32)))
        } else {
            0.0
        };
        let total = rgb + lambda * empty;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                detail: format!("non-finite stage-1 loss or gradient (rgb {rgb}, empty {empty})"),
            });
        }
        let lr = self.learning_rate();
        self.adam.update(&mut self.field.params, &grad, lr)?;
        let report = LossReport {
            stage: "radiance".into(),
            iteration: self.iteration,
            terms: vec![
                ("rgb".into(), rgb),
                ("empty".into(), empty),
                ("psnr".into(), -10.0 * (rgb / 3.0).max(1e-12).log10()),
                ("lr".into(), lr),
                ("levels".into(), mask.active_levels as f64),
            ],
            total,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Steps until the configured iteration count, passing each report to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&LossReport)) -> Result<()> {
        while !self.is_done() {
            let r = self.step()?;
            log(&r);
        }
        Ok(())
    }

    /// Mean squared colour error over every training ray with deterministic sampling.
    pub fn full_loss(&self) -> Result<f64> {
        let cfg = self.sampling.deterministic();
        let source = FieldSource::new(&self.field, None);
        let mut rngs: Vec<ChaCha8Rng> = (0..self.rays.len() as u64).map(|i| rng_for(&[i])).collect();
        let intervals: Vec<Intervals> = self
            .rays
            .par_chunks(self.config.chunk_rays)
            .zip(rngs.par_chunks_mut(self.config.chunk_rays))
            .map(|(r, g)| place_samples(r, &source, &cfg, g))
            .collect::<Vec<_>>()
            .concat();
        let mask = self.field.full_mask();
        Ok(rgb_objective(&self.field, mask, &self.rays, &self.targets, &intervals, cfg.background, self.config.chunk_rays, None))
    }
}
