//! Volume-rendering quadrature along rays, its reverse pass, and image rendering.
//!
//! Each ray is cut into intervals `[e_i, e_{i+1}]` with widths `δ_i` that sum to
//! `t_far - t_near`; every interval is represented by one sample `t_i` inside it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ObjectField, RadianceField};
use crate::geometry::{generate_ray, Camera, Ray, RayBounds, Vec3};
use crate::hash_grid::LevelMask;
use crate::image::{ProbabilityImage, RgbImage};
use crate::real::Real;
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Jitter sample positions inside their intervals.
    pub stratified: bool,
    /// Place the fine samples by inverse-CDF resampling of the coarse weights.
    pub importance_resample: bool,
    /// Colour composited behind the last sample.
    pub background: [f64; 3],
    pub bounds: RayBounds,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            coarse_samples: 64,
            fine_samples: 64,
            stratified: true,
            importance_resample: true,
            background: [0.0; 3],
            bounds: RayBounds::default(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_samples < 2 {
            return Err(Error::Config("coarse_samples must be at least 2".into()));
        }
        Ok(())
    }

    /// Same sampling with fixed midpoints (no jitter).
    pub fn deterministic(&self) -> Self {
        SamplingConfig {
            stratified: false,
            ..self.clone()
        }
    }
}

/// Partition of a ray segment into intervals with one sample per interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervals {
    pub edges: Vec<f64>,
    pub t: Vec<f64>,
}

impl Intervals {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    fn from_edges(edges: Vec<f64>, jitter: Option<&mut ChaCha8Rng>) -> Self {
        let t = match jitter {
            Some(rng) => edges.windows(2).map(|w| w[0] + rng.random::<f64>() * (w[1] - w[0])).collect(),
            None => edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
        };
        Intervals { edges, t }
    }
}

/// `n` equal intervals over `[t_near, t_far]`.
pub fn uniform_intervals(t_near: f64, t_far: f64, n: usize, jitter: Option<&mut ChaCha8Rng>) -> Intervals {
    let step = (t_far - t_near) / n as f64;
    let mut edges: Vec<f64> = (0..=n).map(|i| t_near + step * i as f64).collect();
    edges[n] = t_far;
    Intervals::from_edges(edges, jitter)
}

/// Adds `n_fine` edges drawn from the piecewise-constant density given by `weights` over
/// `coarse`, and returns the merged partition.
pub fn resample_intervals(coarse: &Intervals, weights: &[f64], n_fine: usize, mut jitter: Option<&mut ChaCha8Rng>) -> Intervals {
    debug_assert_eq!(weights.len(), coarse.len());
    let padded: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = padded.iter().sum();
    let mut cdf = Vec::with_capacity(padded.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in &padded {
        acc += w / total;
        cdf.push(acc);
    }
    let last = cdf.len() - 1;
    cdf[last] = 1.0;
    let mut edges = coarse.edges.clone();
    for j in 0..n_fine {
        let offset = match jitter.as_deref_mut() {
            Some(rng) => rng.random::<f64>(),
            None => 0.5,
        };
        let u = (j as f64 + offset) / n_fine as f64;
        let bin = cdf.partition_point(|c| *c <= u).clamp(1, last) - 1;
        let span = cdf[bin + 1] - cdf[bin];
        let frac = if span > 0.0 { (u - cdf[bin]) / span } else { 0.5 };
        edges.push(coarse.edges[bin] + frac.clamp(0.0, 1.0) * (coarse.edges[bin + 1] - coarse.edges[bin]));
    }
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    Intervals::from_edges(edges, jitter)
}

/// Transmittance and compositing weights of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Compositing {
    /// `trans[i]` is the transmittance before sample `i`; `trans[S]` is the exit transmittance.
    pub trans: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Compositing {
    pub fn opacity(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn final_transmittance(&self) -> f64 {
        *self.trans.last().expect("at least one entry")
    }
}

pub fn composite(sigma: &[f64], delta: &[f64]) -> Compositing {
    debug_assert_eq!(sigma.len(), delta.len());
    let mut trans = Vec::with_capacity(sigma.len() + 1);
    let mut weights = Vec::with_capacity(sigma.len());
    let mut depth = 0.0f64;
    for (s, d) in sigma.iter().zip(delta) {
        let t = (-depth).exp();
        let tau = s * d;
        trans.push(t);
        weights.push(-t * (-tau).exp_m1());
        depth += tau;
    }
    trans.push((-depth).exp());
    Compositing { trans, weights }
}

/// Gradient with respect to each `σ_i` of `Σ w_i s_i + T_exit * tail`.
///
/// `s_i` is the upstream gradient dotted with sample `i`'s composited quantities, `tail` the
/// upstream gradient dotted with the background.
pub fn composite_backward(delta: &[f64], comp: &Compositing, per_sample: &[f64], tail: f64) -> Vec<f64> {
    let n = delta.len();
    let mut d_sigma = vec![0.0; n];
    let exit = comp.final_transmittance() * tail;
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        d_sigma[i] = delta[i] * (comp.trans[i + 1] * per_sample[i] - suffix - exit);
        suffix += comp.weights[i] * per_sample[i];
    }
    d_sigma
}

/// Anything that can be queried for density, colour and slot probabilities in world space.
pub trait VolumeSource: Sync {
    /// Number of object slots reported by [`VolumeSource::shade`]; 0 when absent.
    fn num_slots(&self) -> usize;

    fn density(&self, points: &[Vec3]) -> Vec<f64>;

    fn shade(&self, points: &[Vec3], dirs: &[Vec3]) -> Shading;
}

/// Per-sample field values; `probs` is row-major `samples x num_slots`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Shading {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub probs: Vec<f64>,
}

/// Learned fields as a volume source.
#[derive(Clone, Copy, Debug)]
pub struct FieldSource<'a, T> {
    pub radiance: &'a RadianceField<T>,
    pub radiance_mask: LevelMask,
    pub objects: Option<(&'a ObjectField<T>, LevelMask)>,
}

impl<'a, T: Real> FieldSource<'a, T> {
    pub fn new(radiance: &'a RadianceField<T>, objects: Option<&'a ObjectField<T>>) -> Self {
        FieldSource {
            radiance,
            radiance_mask: radiance.full_mask(),
            objects: objects.map(|o| (o, o.full_mask())),
        }
    }
}

fn to_dirs<T: Real>(dirs: &[Vec3]) -> Vec<[T; 3]> {
    dirs.iter().map(|d| d.0.map(T::lit)).collect()
}

impl<T: Real> VolumeSource for FieldSource<'_, T> {
    fn num_slots(&self) -> usize {
        self.objects.map(|(o, _)| o.num_slots).unwrap_or(0)
    }

    fn density(&self, points: &[Vec3]) -> Vec<f64> {
        let p = self.radiance.contract_points(points);
        self.radiance.density(&p, self.radiance_mask).iter().map(|v| v.as_f64()).collect()
    }

    fn shade(&self, points: &[Vec3], dirs: &[Vec3]) -> Shading {
        let p = self.radiance.contract_points(points);
        let tape = self.radiance.forward(&p, &to_dirs::<T>(dirs), self.radiance_mask);
        let probs = match self.objects {
            Some((o, mask)) => {
                let po = o.contract_points(points);
                o.forward(&po, mask).probs.iter().map(|v| v.as_f64()).collect()
            }
            None => Vec::new(),
        };
        Shading {
            sigma: tape.sigma.iter().map(|v| v.as_f64()).collect(),
            color: tape
                .color_out
                .chunks_exact(3)
                .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
                .collect(),
            probs,
        }
    }
}

/// Samples and weights kept for reuse (e.g. by the object-training cache).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleCache {
    pub points: Vec<Vec3>,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayRenderResult {
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub obj_probs: Vec<f64>,
    pub samples: Option<SampleCache>,
}

/// Sample placement for a batch of rays: coarse pass, optional density-driven resampling.
pub fn place_samples<S: VolumeSource + ?Sized>(rays: &[Ray], source: &S, cfg: &SamplingConfig, rngs: &mut [ChaCha8Rng]) -> Vec<Intervals> {
    let stratified = cfg.stratified;
    let resample = cfg.importance_resample && cfg.fine_samples > 0;
    let coarse_n = if resample {
        cfg.coarse_samples
    } else {
        cfg.coarse_samples + cfg.fine_samples
    };
    let coarse: Vec<Intervals> = rays
        .iter()
        .zip(rngs.iter_mut())
        .map(|(r, rng)| uniform_intervals(r.t_near, r.t_far, coarse_n, stratified.then_some(rng)))
        .collect();
    if !resample {
        return coarse;
    }
    let points: Vec<Vec3> = rays
        .iter()
        .zip(&coarse)
        .flat_map(|(r, iv)| iv.t.iter().map(move |t| r.at(*t)))
        .collect();
    let sigma = source.density(&points);
    coarse
        .iter()
        .zip(sigma.chunks_exact(coarse_n))
        .zip(rngs.iter_mut())
        .map(|((iv, s), rng)| {
            let comp = composite(s, &iv.deltas());
            resample_intervals(iv, &comp.weights, cfg.fine_samples, stratified.then_some(rng))
        })
        .collect()
}

/// Renders a batch of rays. Ray `i` draws its jitter from `(seed, first_index + i)`.
pub fn render_rays<S: VolumeSource + ?Sized>(
    rays: &[Ray],
    source: &S,
    cfg: &SamplingConfig,
    seed: u64,
    first_index: u64,
    keep_samples: bool,
) -> Result<Vec<RayRenderResult>> {
    cfg.validate()?;
    for r in rays {
        r.validate()?;
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..rays.len())
        .map(|i| rng_for(&[seed, first_index + i as u64]))
        .collect();
    let intervals = place_samples(rays, source, cfg, &mut rngs);
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    for (r, iv) in rays.iter().zip(&intervals) {
        for t in &iv.t {
            points.push(r.at(*t));
            dirs.push(r.direction);
        }
    }
    let shading = source.shade(&points, &dirs);
    let n_slots = source.num_slots();
    let mut out = Vec::with_capacity(rays.len());
    let mut start = 0;
    for iv in &intervals {
        let s = iv.len();
        let range = start..start + s;
        let delta = iv.deltas();
        let comp = composite(&shading.sigma[range.clone()], &delta);
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut probs = vec![0.0; n_slots];
        for (k, i) in range.clone().enumerate() {
            let w = comp.weights[k];
            for c in 0..3 {
                color[c] += w * shading.color[i][c];
            }
            depth += w * iv.t[k];
            for (n, p) in probs.iter_mut().enumerate() {
                *p += w * shading.probs[i * n_slots + n];
            }
        }
        let exit = comp.final_transmittance();
        for c in 0..3 {
            color[c] += exit * cfg.background[c];
        }
        if color.iter().chain(&probs).any(|v| !v.is_finite()) || !depth.is_finite() {
            return Err(Error::NonFinite("rendered ray".into()));
        }
        out.push(RayRenderResult {
            color,
            opacity: comp.opacity(),
            depth,
            obj_probs: probs,
            samples: keep_samples.then(|| SampleCache {
                points: points[range.clone()].to_vec(),
                t: iv.t.clone(),
                delta,
                weights: comp.weights.clone(),
            }),
        });
        start += s;
    }
    Ok(out)
}

pub fn render_ray<S: VolumeSource + ?Sized>(ray: &Ray, source: &S, cfg: &SamplingConfig, seed: u64) -> Result<RayRenderResult> {
    Ok(render_rays(std::slice::from_ref(ray), source, cfg, seed, 0, true)?.remove(0))
}

/// Rays evaluated together per field call when rendering images.
pub const RENDER_CHUNK: usize = 256;

/// Renders every pixel of `camera`, returning per-ray results in row-major order.
pub fn render_pixels<S: VolumeSource + ?Sized>(camera: &Camera, source: &S, cfg: &SamplingConfig, seed: u64, keep_samples: bool) -> Result<Vec<RayRenderResult>> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let rays: Vec<Ray> = (0..w * h)
        .map(|i| generate_ray(camera, i / w, i % w, &cfg.bounds))
        .collect::<Result<_>>()?;
    let chunks: Vec<Result<Vec<RayRenderResult>>> = rays
        .par_chunks(RENDER_CHUNK)
        .enumerate()
        .map(|(c, chunk)| render_rays(chunk, source, cfg, seed, (c * RENDER_CHUNK) as u64, keep_samples))
        .collect();
    let mut out = Vec::with_capacity(w * h);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Colour image plus probability/opacity/depth channels for one camera.
pub fn render_image<S: VolumeSource + ?Sized>(camera: &Camera, source: &S, cfg: &SamplingConfig, seed: u64) -> Result<(RgbImage, ProbabilityImage)> {
    let results = render_pixels(camera, source, cfg, seed, false)?;
    Ok(assemble(camera.width, camera.height, source.num_slots(), &results))
}

pub fn assemble(width: usize, height: usize, num_slots: usize, results: &[RayRenderResult]) -> (RgbImage, ProbabilityImage) {
    let mut rgb = RgbImage::new(width, height);
    let mut probs = ProbabilityImage::new(num_slots, width, height);
    let px = width * height;
    for (i, r) in results.iter().enumerate() {
        for c in 0..3 {
            rgb.data[i * 3 + c] = r.color[c] as f32;
        }
        probs.opacity[i] = r.opacity;
        probs.depth[i] = r.depth;
        for (n, p) in r.obj_probs.iter().enumerate() {
            probs.values[n * px + i] = *p;
        }
    }
    (rgb, probs)
}
