use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::fields::{ObjectConfig, ObjectField, RadianceField};
use crate::geometry::{Camera, Vec3};
use crate::hash_grid::{tv_loss, TvSampler};
use crate::image::{Bitmap, ProbabilityImage};
use crate::losses::{false_positive_loss, matching_loss, LossReport, LossWeights, PixelNorm};
use crate::masks::{background_from_results, postprocess, Mask, MaskSet, PostprocessConfig};
use crate::matching::{affinity_matrix, argmax_match, hungarian_match, MatchingResult};
use crate::optim::{Adam, LrSchedule};
use crate::real::Real;
use crate::render::{render_pixels, FieldSource, SamplingConfig};
use crate::seed::{derive_seed, rng_for};

use super::{MatchingMode, SlotBudget, TrainConfig, STAGE_OBJECTS};

/// Frozen-radiance samples of one view: for every pixel, the sample points whose
/// compositing weight passed the cache threshold, plus the view's processed masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewCache {
    pub view_id: String,
    pub width: usize,
    pub height: usize,
    /// Pixel `p` owns samples `offsets[p]..offsets[p + 1]`.
    pub offsets: Vec<usize>,
    pub points: Vec<Vec3>,
    pub weights: Vec<f64>,
    /// Post-processed masks with the background mask appended.
    pub masks: MaskSet,
}

impl ViewCache {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn opacity(&self) -> Vec<f64> {
        self.offsets.windows(2).map(|r| self.weights[r[0]..r[1]].iter().sum()).collect()
    }

    /// The `height x width` window with top-left pixel `(row, col)`, masks included.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<ViewCache> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "crop {height}x{width} at ({row}, {col}) outside a {}x{} view",
                self.height, self.width
            )));
        }
        let mut offsets = vec![0];
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for r in row..row + height {
            for c in col..col + width {
                let p = r * self.width + c;
                let span = self.offsets[p]..self.offsets[p + 1];
                points.extend_from_slice(&self.points[span.clone()]);
                weights.extend_from_slice(&self.weights[span]);
                offsets.push(points.len());
            }
        }
        let mut masks = MaskSet::new(self.masks.view_id.clone(), width, height);
        masks.processed = self.masks.processed;
        for m in &self.masks.masks {
            masks.push(Mask {
                bitmap: Bitmap::from_fn(width, height, |r, c| m.bitmap.get(row + r, col + c)),
                ..m.clone()
            })?;
        }
        Ok(ViewCache {
            view_id: self.view_id.clone(),
            width,
            height,
            offsets,
            points,
            weights,
            masks,
        })
    }
}

/// Views with more pixels than this are trained on a random square crop of this area.
pub const MAX_FULL_VIEW_SIDE: usize = 128;

/// Renders `camera` through the frozen radiance field with deterministic sampling and keeps
/// the samples that carry weight.
pub fn build_view_cache(
    camera: &Camera,
    raw_masks: &MaskSet,
    radiance: &RadianceField<f32>,
    sampling: &SamplingConfig,
    post: &PostprocessConfig,
    threshold: f64,
) -> Result<ViewCache> {
    if raw_masks.width != camera.width || raw_masks.height != camera.height {
        return Err(Error::Data(format!("view {}: masks do not match the camera resolution", raw_masks.view_id)));
    }
    let results = render_pixels(camera, &FieldSource::new(radiance, None), &sampling.deterministic(), 0, true)?;
    let background = background_from_results(camera, &results);
    let masks = postprocess(raw_masks, post).with_background(background)?;
    let mut offsets = Vec::with_capacity(results.len() + 1);
    let mut points = Vec::new();
    let mut weights = Vec::new();
    offsets.push(0);
    for r in &results {
        let s = r.samples.as_ref().expect("samples kept");
        for (p, w) in s.points.iter().zip(&s.weights) {
            if *w >= threshold {
                points.push(*p);
                weights.push(*w);
            }
        }
        offsets.push(points.len());
    }
    Ok(ViewCache {
        view_id: raw_masks.view_id.clone(),
        width: camera.width,
        height: camera.height,
        offsets,
        points,
        weights,
        masks,
    })
}

/// Losses of one view and, when requested, its gradient contributions.
pub struct ViewLoss<T> {
    pub matching: f64,
    pub false_positive: f64,
    pub assignment: MatchingResult,
    pub probs: ProbabilityImage,
    mlp_grad: Vec<T>,
    points: Vec<[T; 3]>,
    d_enc: Vec<T>,
}

impl<T: Real> ViewLoss<T> {
    /// Adds this view's gradient into `grad` (laid out like the field's parameters).
    pub fn accumulate(&self, field: &ObjectField<T>, grad: &mut [T]) {
        if self.d_enc.is_empty() {
            return;
        }
        let g = field.grid.param_count();
        for (a, b) in grad[g..].iter_mut().zip(&self.mlp_grad) {
            *a += *b;
        }
        field.scatter_grid_gradient(grad, &self.points, field.full_mask(), &self.d_enc);
    }
}

/// Renders the view's probability image from the cache, assigns masks to slots (outside the
/// differentiated graph) and evaluates `L_γ` and `L_FP`.
///
/// Gradients are those of `scale * (L_γ + lambda_fp * L_FP)`.
pub fn object_view_loss<T: Real>(
    field: &ObjectField<T>,
    cache: &ViewCache,
    mode: MatchingMode,
    norm: PixelNorm,
    lambda_fp: f64,
    scale: f64,
    want_grad: bool,
) -> Result<ViewLoss<T>> {
    let n = field.num_slots;
    let px = cache.pixels();
    if cache.masks.len() > n && mode == MatchingMode::Hungarian {
        return Err(Error::Capacity { masks: cache.masks.len(), slots: n });
    }
    let points = field.contract_points(&cache.points);
    let tape = field.forward(&points, field.full_mask());
    let mut probs = ProbabilityImage::new(n, cache.width, cache.height);
    for p in 0..px {
        let mut opacity = 0.0;
        for i in cache.offsets[p]..cache.offsets[p + 1] {
            let w = cache.weights[i];
            opacity += w;
            for k in 0..n {
                probs.values[k * px + p] += w * tape.probs[i * n + k].as_f64();
            }
        }
        probs.opacity[p] = opacity;
    }
    let aff = affinity_matrix(&probs, &cache.masks)?;
    let assignment = match mode {
        MatchingMode::Hungarian => hungarian_match(&aff)?,
        MatchingMode::Argmax => argmax_match(&aff),
    };
    let mut d_img = vec![0.0; if want_grad { n * px } else { 0 }];
    let grad_m = want_grad.then_some((&mut d_img[..], scale));
    let matching = matching_loss(&cache.masks, &probs, &assignment, norm, grad_m)?;
    let grad_fp = want_grad.then_some((&mut d_img[..], scale * lambda_fp));
    let false_positive = false_positive_loss(&cache.masks, &probs, &assignment, norm, grad_fp)?;
    let mut out = ViewLoss {
        matching,
        false_positive,
        assignment,
        probs,
        mlp_grad: Vec::new(),
        points: Vec::new(),
        d_enc: Vec::new(),
    };
    if want_grad && !cache.masks.is_empty() {
        let mut d_o = vec![T::zero(); tape.probs.len()];
        for p in 0..px {
            for i in cache.offsets[p]..cache.offsets[p + 1] {
                let w = cache.weights[i];
                for k in 0..n {
                    d_o[i * n + k] = T::lit(w * d_img[k * px + p]);
                }
            }
        }
        out.mlp_grad = vec![T::zero(); field.mlp_param_count()];
        out.d_enc = field.backward_mlp(&tape, &d_o, &mut out.mlp_grad);
        out.points = points;
    }
    Ok(out)
}

/// Stage-2 optimiser state. The radiance field is only read while building the caches.
pub struct ObjectTrainer {
    pub field: ObjectField<f32>,
    pub adam: Adam<f32>,
    /// Completed iterations.
    pub iteration: usize,
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub budget: SlotBudget,
    pub caches: Vec<ViewCache>,
}

impl ObjectTrainer {
    /// Caches for every training view that has supervision masks.
    pub fn build_caches(
        dataset: &SceneDataset,
        radiance: &RadianceField<f32>,
        sampling: &SamplingConfig,
        post: &PostprocessConfig,
        threshold: f64,
    ) -> Result<Vec<ViewCache>> {
        let mut sampling = sampling.clone();
        sampling.background = dataset.background;
        let caches: Vec<ViewCache> = dataset
            .train_frames()
            .filter_map(|f| dataset.masks.get(&f.view_id).map(|m| (f, m)))
            .map(|(f, m)| build_view_cache(&f.camera, m, radiance, &sampling, post, threshold))
            .collect::<Result<_>>()?;
        if caches.is_empty() {
            return Err(Error::Data("no training view has supervision masks".into()));
        }
        Ok(caches)
    }

    pub fn new(caches: Vec<ViewCache>, objects: ObjectConfig, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        let budget = SlotBudget::from_counts(caches.iter().map(|c| c.masks.len()));
        let mut rng = rng_for(&[config.seed, STAGE_OBJECTS, u64::MAX]);
        let field = ObjectField::new(objects, budget.num_slots, &mut rng)?;
        let adam = Adam::new(config.adam, field.param_count());
        Self::resume(caches, field, adam, 0, config, weights)
    }

    pub fn resume(
        caches: Vec<ViewCache>,
        field: ObjectField<f32>,
        adam: Adam<f32>,
        iteration: usize,
        config: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let budget = SlotBudget::from_counts(caches.iter().map(|c| c.masks.len()));
        if field.num_slots < budget.k_max {
            return Err(Error::Capacity { masks: budget.k_max, slots: field.num_slots });
        }
        if adam.m.len() != field.param_count() {
            return Err(Error::Data("optimizer state does not match the object field".into()));
        }
        Ok(ObjectTrainer {
            budget: SlotBudget { k_max: budget.k_max, num_slots: field.num_slots },
            field,
            adam,
            iteration,
            config,
            weights,
            caches,
        })
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::WarmupDecay {
            warmup: self.config.warmup_iters,
            decay: self.config.lr_decay,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.lr_stage2 * self.schedule().factor(self.iteration)
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.stage2_iters
    }

    /// Indices of the views used by the current iteration.
    pub fn batch_views(&self) -> Vec<usize> {
        let mut rng = rng_for(&[self.config.seed, STAGE_OBJECTS, self.iteration as u64]);
        let v = self.caches.len();
        let mut idx = sample(&mut rng, v, self.config.stage2_batch_views.min(v)).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn step(&mut self) -> Result<LossReport> {
        let views = self.batch_views();
        let scale = 1.0 / views.len() as f64;
        let cfg = &self.config;
        let lambda_fp = self.weights.lambda_fp;
        let it = self.iteration as u64;
        let per_view: Vec<ViewLoss<f32>> = views
            .par_iter()
            .map(|v| {
                let cache = &self.caches[*v];
                let side = MAX_FULL_VIEW_SIDE;
                if cache.pixels() <= side * side {
                    return object_view_loss(&self.field, cache, cfg.matching, cfg.pixel_norm, lambda_fp, scale, true);
                }
                let (h, w) = (cache.height.min(side), cache.width.min(side));
                let mut rng = rng_for(&[cfg.seed, STAGE_OBJECTS, it, *v as u64]);
                let crop = cache.crop(rng.random_range(0..=cache.height - h), rng.random_range(0..=cache.width - w), h, w)?;
                object_view_loss(&self.field, &crop, cfg.matching, cfg.pixel_norm, lambda_fp, scale, true)
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0f32; self.field.param_count()];
        for v in &per_view {
            v.accumulate(&self.field, &mut grad);
        }
        let matching = per_view.iter().map(|v| v.matching).sum::<f64>() * scale;
        let fp = per_view.iter().map(|v| v.false_positive).sum::<f64>() * scale;
        let lambda_tv = self.weights.lambda_tv;
        let g = self.field.grid.param_count();
        let sampler = TvSampler {
            pairs_per_level: self.config.tv_pairs_per_level,
        };
        let tv_seed = derive_seed(&[cfg.seed, STAGE_OBJECTS, self.iteration as u64, 0x7F]);
        let tv = if lambda_tv > 0.0 {
            let (grid_params, _) = self.field.params.split_at(g);
            tv_loss(&self.field.grid, grid_params, &sampler, tv_seed, Some(&mut grad[..g]), lambda_tv as f32) as f64
        } else {
            0.0
        };
        let total = matching + lambda_fp * fp + lambda_tv * tv;
        if !total.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                detail: format!("non-finite stage-2 loss or gradient (matching {matching}, fp {fp}, tv {tv})"),
            });
        }
        let lr = self.learning_rate();
        self.adam.update(&mut self.field.params, &grad, lr)?;
        let report = LossReport {
            stage: "objects".into(),
            iteration: self.iteration,
            terms: vec![
                ("matching".into(), matching),
                ("false_positive".into(), fp),
                ("tv".into(), tv),
                ("lr".into(), lr),
            ],
            total,
        };
        self.iteration += 1;
        Ok(report)
    }

    pub fn run(&mut self, mut log: impl FnMut(&LossReport)) -> Result<()> {
        while !self.is_done() {
            let r = self.step()?;
            log(&r);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::tests::{tiny_objects, tiny_radiance};
    use crate::image::Bitmap;
    use crate::nn::Activation;
    use crate::train::tests::{tiny_config, tiny_dataset, tiny_sampling};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cache(num_masks: usize) -> ViewCache {
        let (w, h) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut offsets = vec![0];
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..w * h {
            for _ in 0..rng.random_range(1..4) {
                points.push(Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)));
                weights.push(rng.random_range(0.05..0.4));
            }
            offsets.push(points.len());
        }
        let bitmaps = (0..num_masks).map(|k| Bitmap::from_fn(w, h, |r, c| (r * w + c + k) % (k + 2) == 0)).collect();
        ViewCache {
            view_id: "v".into(),
            width: w,
            height: h,
            offsets,
            points,
            weights,
            masks: MaskSet::from_bitmaps("v", w, h, bitmaps).unwrap(),
        }
    }

    fn field(slots: usize) -> ObjectField<f64> {
        ObjectField::new(tiny_objects(), slots, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn check_gradient(mode: MatchingMode, norm: PixelNorm) {
        let c = cache(3);
        let mut f = field(5);
        let (lfp, scale) = (0.3, 0.5);
        let loss = |f: &ObjectField<f64>| {
            let v = object_view_loss::<f64>(f, &c, mode, norm, lfp, scale, false).unwrap();
            scale * (v.matching + lfp * v.false_positive)
        };
        let v = object_view_loss::<f64>(&f, &c, mode, norm, lfp, scale, true).unwrap();
        let mut grad = vec![0.0; f.param_count()];
        v.accumulate(&f, &mut grad);
        assert!(grad.iter().any(|g| *g != 0.0));
        let h = 1e-6;
        for i in (0..f.param_count()).step_by(3) {
            let p = f.params[i];
            f.params[i] = p + h;
            let up = loss(&f);
            f.params[i] = p - h;
            let down = loss(&f);
            f.params[i] = p;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-7 + 1e-4 * fd.abs(), "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn matched_gradient_matches_finite_differences() {
        check_gradient(MatchingMode::Hungarian, PixelNorm::Mean);
        check_gradient(MatchingMode::Hungarian, PixelNorm::Sum);
    }

    #[test]
    fn argmax_gradient_matches_finite_differences() {
        check_gradient(MatchingMode::Argmax, PixelNorm::Mean);
    }

    #[test]
    fn probability_image_sums_to_opacity() {
        let c = cache(2);
        let v = object_view_loss::<f64>(&field(4), &c, MatchingMode::Hungarian, PixelNorm::Mean, 0.01, 1.0, false).unwrap();
        for (p, o) in c.opacity().iter().enumerate() {
            let s: f64 = (0..4).map(|k| v.probs.value(k, p)).sum();
            assert!((s - o).abs() < 1e-12);
            assert_eq!(v.probs.opacity[p], *o);
        }
    }

    #[test]
    fn too_many_masks_is_a_capacity_error() {
        let r = object_view_loss::<f64>(&field(2), &cache(3), MatchingMode::Hungarian, PixelNorm::Mean, 0.01, 1.0, false);
        assert!(matches!(r, Err(Error::Capacity { masks: 3, slots: 2 })));
    }

    #[test]
    fn maskless_view_has_no_gradient() {
        let f = field(3);
        let v = object_view_loss::<f64>(&f, &cache(0), MatchingMode::Hungarian, PixelNorm::Mean, 0.01, 1.0, true).unwrap();
        let mut grad = vec![0.0; f.param_count()];
        v.accumulate(&f, &mut grad);
        assert!(grad.iter().all(|g| *g == 0.0));
        assert_eq!((v.matching, v.false_positive), (0.0, 0.0));
    }

    #[test]
    fn crop_keeps_pixels_and_masks() {
        let c = cache(2);
        let k = c.crop(1, 1, 2, 3).unwrap();
        assert_eq!((k.width, k.height, k.pixels()), (3, 2, 6));
        for r in 0..2 {
            for col in 0..3 {
                let (p, q) = ((r + 1) * c.width + col + 1, r * 3 + col);
                assert_eq!(&c.weights[c.offsets[p]..c.offsets[p + 1]], &k.weights[k.offsets[q]..k.offsets[q + 1]]);
                for m in 0..2 {
                    assert_eq!(c.masks.masks[m].bitmap.get(r + 1, col + 1), k.masks.masks[m].bitmap.get(r, col));
                }
            }
        }
        assert_eq!(c.crop(0, 0, 3, 4).unwrap(), c);
        assert!(c.crop(2, 0, 2, 4).is_err());
    }

    #[test]
    fn large_views_train_on_crops() {
        let mut t = trainer();
        let side = MAX_FULL_VIEW_SIDE + 2;
        for c in t.caches.iter_mut() {
            let bitmaps = c.masks.masks.iter().map(|_| Bitmap::from_fn(side, side, |r, col| (r + col) % 3 == 0)).collect();
            *c = ViewCache {
                view_id: c.view_id.clone(),
                width: side,
                height: side,
                offsets: (0..=side * side).collect(),
                points: (0..side * side).map(|i| Vec3::new(i as f64 / (side * side) as f64 - 0.5, 0.1, -0.2)).collect(),
                weights: vec![0.5; side * side],
                masks: MaskSet::from_bitmaps("v", side, side, bitmaps).unwrap(),
            };
        }
        let r = t.step().unwrap();
        assert!(r.total.is_finite());
    }

    fn trainer() -> ObjectTrainer {
        let ds = tiny_dataset();
        let radiance = RadianceField::<f32>::new(tiny_radiance(Activation::Softplus), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let caches = ObjectTrainer::build_caches(&ds, &radiance, &tiny_sampling(), &PostprocessConfig::default(), 1e-3).unwrap();
        ObjectTrainer::new(caches, tiny_objects(), tiny_config(), LossWeights::default()).unwrap()
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn slot_budget_is_twice_the_largest_mask_count() {
        let t = trainer();
        let k = t.caches.iter().map(|c| c.masks.len()).max().unwrap();
        assert_eq!(t.budget.k_max, k);
        assert_eq!(t.field.num_slots, 2 * k);
    }

    #[test]
    fn batches_are_distinct_sorted_and_reproducible() {
        let mut t = trainer();
        for it in 0..6 {
            t.iteration = it;
            let b = t.batch_views();
            assert_eq!(b.len(), 2);
            assert!(b.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(b, t.batch_views());
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let mut a = trainer();
        let mut b = trainer();
        a.run(|_| {}).unwrap();
        b.step().unwrap();
        let (field, adam, it) = (b.field.clone(), b.adam.clone(), b.iteration);
        let mut c = ObjectTrainer::resume(b.caches.clone(), field, adam, it, b.config.clone(), b.weights).unwrap();
        c.run(|_| {}).unwrap();
        assert_eq!(c.iteration, a.iteration);
        assert_eq!(bits(&c.field.params), bits(&a.field.params));
    }

    #[test]
    fn learning_rate_warms_up_then_decays() {
        let mut t = trainer();
        assert!((t.learning_rate() - 0.15 / 20.0).abs() < 1e-12);
        t.iteration = 30;
        assert!((t.learning_rate() - 0.15 * 0.995f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn divergence_leaves_parameters_untouched() {
        let mut t = trainer();
        let g = t.field.grid.param_count();
        t.field.params[g + 1] = f32::INFINITY;
        let before = bits(&t.field.params);
        assert!(matches!(t.step(), Err(Error::Divergence { .. })));
        assert_eq!(bits(&t.field.params), before);
    }

    #[test]
    fn resume_rejects_a_small_field() {
        let t = trainer();
        let small = ObjectField::<f32>::new(tiny_objects(), 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let adam = Adam::new(t.config.adam, small.param_count());
        let r = ObjectTrainer::resume(t.caches, small, adam, 0, t.config, t.weights);
        assert!(matches!(r, Err(Error::Capacity { .. })));
    }
}
