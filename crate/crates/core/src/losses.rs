//! Training objectives and their gradients with respect to rendered quantities.
//!
//! Mask losses take a [`ProbabilityImage`] and, when asked, accumulate `scale * dL/dO` into a
//! buffer laid out like `ProbabilityImage::values`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fields::RadianceField;
use crate::hash_grid::{DOMAIN_BOUND, LevelMask};
use crate::image::ProbabilityImage;
use crate::masks::MaskSet;
use crate::matching::MatchingResult;
use crate::real::Real;
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_fp: f64,
    pub lambda_tv: f64,
    pub lambda_empty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fp: 0.01,
            lambda_tv: 0.01,
            lambda_empty: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_fp < 0.0 || self.lambda_tv < 0.0 || self.lambda_empty < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// How per-pixel squared errors are reduced inside a mask loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelNorm {
    /// Mean over the image's pixels.
    #[default]
    Mean,
    /// Raw sum over pixels.
    Sum,
}

impl PixelNorm {
    fn factor(self, pixels: usize) -> f64 {
        match self {
            PixelNorm::Mean => 1.0 / pixels as f64,
            PixelNorm::Sum => 1.0,
        }
    }
}

/// Mean over rays of `‖Ĉ - C‖²`, with its gradient with respect to `rendered`.
/// Both slices hold 3 values per ray.
pub fn rgb_loss(rendered: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if rendered.len() != target.len() || rendered.len() % 3 != 0 {
        return Err(shape_err(target.len(), rendered.len()));
    }
    let rays = (rendered.len() / 3).max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(rendered.len());
    for (r, t) in rendered.iter().zip(target) {
        let d = r - t;
        loss += d * d;
        grad.push(2.0 * d / rays);
    }
    Ok((loss / rays, grad))
}

fn check_view(masks: &MaskSet, probs: &ProbabilityImage, gamma: &MatchingResult) -> Result<()> {
    if masks.width != probs.width || masks.height != probs.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", probs.height, probs.width),
            actual: format!("{}x{}", masks.height, masks.width),
        });
    }
    if gamma.gamma.len() != masks.len() || gamma.gamma.iter().any(|n| *n >= probs.num_slots) {
        return Err(Error::InvalidInput("assignment does not fit this view".into()));
    }
    Ok(())
}

/// `(1/K) Σ_m ‖M_m - O_γ(m)‖²` under `norm`. Zero when the view has no masks.
pub fn matching_loss(
    masks: &MaskSet,
    probs: &ProbabilityImage,
    gamma: &MatchingResult,
    norm: PixelNorm,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    check_view(masks, probs, gamma)?;
    let k = masks.len();
    if k == 0 {
        return Ok(0.0);
    }
    let px = probs.pixels();
    let f = norm.factor(px) / k as f64;
    let mut loss = 0.0;
    let mut grad = grad;
    for (m, mask) in masks.masks.iter().enumerate() {
        let n = gamma.gamma[m];
        let o = probs.channel(n);
        for p in 0..px {
            let d = o[p] as f64 - if mask.bitmap.data[p] { 1.0 } else { 0.0 };
            loss += d * d;
            if let Some((g, scale)) = grad.as_mut() {
                g[n * px + p] += *scale * f * 2.0 * d;
            }
        }
    }
    Ok(loss * f)
}

/// `(1/K) Σ_m Σ_{n≠γ(m)} ‖M_m * O_n‖²` under `norm`. Zero when the view has no masks.
pub fn false_positive_loss(
    masks: &MaskSet,
    probs: &ProbabilityImage,
    gamma: &MatchingResult,
    norm: PixelNorm,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    check_view(masks, probs, gamma)?;
    let k = masks.len();
    if k == 0 {
        return Ok(0.0);
    }
    let px = probs.pixels();
    let f = norm.factor(px) / k as f64;
    let mut loss = 0.0;
    let mut grad = grad;
    for (m, mask) in masks.masks.iter().enumerate() {
        for n in (0..probs.num_slots).filter(|n| *n != gamma.gamma[m]) {
            let o = probs.channel(n);
            for p in (0..px).filter(|p| mask.bitmap.data[*p]) {
                let v = o[p] as f64;
                loss += v * v;
                if let Some((g, scale)) = grad.as_mut() {
                    g[n * px + p] += *scale * f * 2.0 * v;
                }
            }
        }
    }
    Ok(loss * f)
}

/// Points drawn uniformly from the `[-2, 2]^3` cube for the empty-space penalty.
pub fn empty_space_points(num_points: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng_for(&[seed, 0xE4]);
    (0..num_points)
        .map(|_| std::array::from_fn(|_| rng.random_range(-DOMAIN_BOUND..DOMAIN_BOUND)))
        .collect()
}

/// Mean `|σ(x)|` over uniform samples of the cube. With `grad`, accumulates
/// `weight * dL/dθ` into the radiance parameter gradient.
pub fn empty_space_loss<T: Real>(
    radiance: &RadianceField<T>,
    mask: LevelMask,
    num_points: usize,
    seed: u64,
    grad: Option<(&mut [T], T)>,
) -> f64 {
    if num_points == 0 {
        return 0.0;
    }
    let world: Vec<crate::geometry::Vec3> = empty_space_points(num_points, seed)
        .into_iter()
        .map(crate::geometry::Vec3)
        .collect();
    let pts = radiance.contract_points(&world);
    match grad {
        None => {
            let s = radiance.density(&pts, mask);
            s.iter().map(|v| v.as_f64().abs()).sum::<f64>() / num_points as f64
        }
        Some((g, weight)) => {
            let dirs = vec![[T::zero(), T::zero(), T::one()]; pts.len()];
            let tape = radiance.forward(&pts, &dirs, mask);
            let inv = weight / T::lit(num_points as f64);
            let d_sigma: Vec<T> = tape.sigma.iter().map(|s| inv * s.signum()).collect();
            radiance.backward_density(&tape, &d_sigma, g);
            tape.sigma.iter().map(|v| v.as_f64().abs()).sum::<f64>() / num_points as f64
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: String,
    pub iteration: usize,
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_json_line(&self) -> String {
        let mut map = serde_json::Map::new();
        map.insert("stage".into(), self.stage.clone().into());
        map.insert("iteration".into(), self.iteration.into());
        for (k, v) in &self.terms {
            map.insert(k.clone(), (*v).into());
        }
        map.insert("total".into(), self.total.into());
        serde_json::Value::Object(map).to_string()
    }
}
