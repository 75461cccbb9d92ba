//! Learnable scene functions: density σ(x), view-dependent colour c(x, d) and the object
//! probability vector o(x).
//!
//! Both fields take world-space points, contract them into the encoder domain and run a
//! hash-grid encoding followed by small MLPs. Forward passes return a tape that the matching
//! backward pass consumes; gradients accumulate into a flat buffer laid out like `params`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ContractionConfig, Vec3};
use crate::hash_grid::{HashGrid, HashGridConfig, LevelMask};
use crate::nn::{Activation, Mlp, MlpTape};
use crate::real::Real;

/// Upper clamp on density.
pub const MAX_DENSITY: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadianceConfig {
    pub grid: HashGridConfig,
    pub density_hidden: Vec<usize>,
    pub color_hidden: Vec<usize>,
    pub geo_feature_dim: usize,
    /// Number of spherical-harmonic bands for the view direction (degree 4 = 16 coefficients).
    pub sh_degree: usize,
    pub activation: Activation,
    pub grid_init_std: f64,
    pub contraction: ContractionConfig,
}

impl Default for RadianceConfig {
    fn default() -> Self {
        RadianceConfig {
            grid: HashGridConfig::radiance_default(),
            density_hidden: vec![64; 3],
            color_hidden: vec![32; 3],
            geo_feature_dim: 15,
            sh_degree: 4,
            activation: Activation::Relu,
            grid_init_std: 1e-2,
            contraction: ContractionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub grid: HashGridConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub grid_init_std: f64,
    pub contraction: ContractionConfig,
}

impl Default for ObjectConfig {
    fn default() -> Self {
        ObjectConfig {
            grid: HashGridConfig::object_default(),
            hidden: vec![32; 2],
            activation: Activation::Relu,
            grid_init_std: 1e-2,
            contraction: ContractionConfig::default(),
        }
    }
}

/// Real spherical-harmonic basis of a unit direction, `degree * degree` coefficients (degree ≤ 4).
pub fn sh_encode<T: Real>(d: &[T; 3], degree: usize, out: &mut [T]) {
    let x = d[0].as_f64();
    let y = d[1].as_f64();
    let z = d[2].as_f64();
    let (x2, y2, z2) = (x * x, y * y, z * z);
    let all = [
        0.282_094_791_773_878_14,
        -0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        -0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        -1.092_548_430_592_079_2 * y * z,
        0.946_174_695_757_56 * z2 - 0.315_391_565_252_52,
        -1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (x2 - y2),
        0.590_043_589_926_643_5 * y * (3.0 * x2 - y2),
        2.890_611_442_640_553_8 * x * y * z,
        0.457_045_799_464_465_7 * y * (5.0 * z2 - 1.0),
        0.373_176_332_590_115_4 * z * (5.0 * z2 - 3.0),
        0.457_045_799_464_465_7 * x * (5.0 * z2 - 1.0),
        1.445_305_721_320_277 * z * (x2 - y2),
        0.590_043_589_926_643_5 * x * (x2 - 3.0 * y2),
    ];
    let n = degree * degree;
    for (o, v) in out[..n].iter_mut().zip(all) {
        *o = T::lit(v);
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn contract_all<T: Real>(contraction: &ContractionConfig, pts: &[Vec3]) -> Vec<[T; 3]> {
    pts.iter()
        .map(|p| contraction.apply(*p).0.map(T::lit))
        .collect()
}

/// Radiance field: hash grid → density MLP (σ + geometry feature) → colour MLP.
#[derive(Clone, Debug)]
pub struct RadianceField<T> {
    pub config: RadianceConfig,
    pub grid: HashGrid,
    pub density_mlp: Mlp,
    pub color_mlp: Mlp,
    pub params: Vec<T>,
}

/// Recorded forward pass of the radiance field over a batch of points.
#[derive(Clone, Debug)]
pub struct RadianceTape<T> {
    pub points: Vec<[T; 3]>,
    pub mask: LevelMask,
    density: MlpTape<T>,
    color: MlpTape<T>,
    raw_sigma: Vec<T>,
    pub sigma: Vec<T>,
    /// Row-major `batch x 3`.
    pub color_out: Vec<T>,
}

impl<T: Real> RadianceTape<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl<T: Real> RadianceField<T> {
    pub fn new(config: RadianceConfig, rng: &mut impl Rng) -> Result<Self> {
        let (grid, density_mlp, color_mlp) = Self::layout(&config)?;
        let mut params = grid.init_params::<T>(rng, config.grid_init_std);
        params.extend(density_mlp.init_params::<T>(rng));
        params.extend(color_mlp.init_params::<T>(rng));
        Ok(RadianceField {
            config,
            grid,
            density_mlp,
            color_mlp,
            params,
        })
    }

    /// Rebuilds a field around existing parameters (e.g. from a checkpoint).
    pub fn from_params(config: RadianceConfig, params: Vec<T>) -> Result<Self> {
        let (grid, density_mlp, color_mlp) = Self::layout(&config)?;
        let expected = grid.param_count() + density_mlp.param_count() + color_mlp.param_count();
        if params.len() != expected {
            return Err(Error::Data(format!(
                "radiance parameter count {} does not match configuration ({expected})",
                params.len()
            )));
        }
        Ok(RadianceField {
            config,
            grid,
            density_mlp,
            color_mlp,
            params,
        })
    }

    fn layout(config: &RadianceConfig) -> Result<(HashGrid, Mlp, Mlp)> {
        config.contraction.validate()?;
        if config.sh_degree == 0 || config.sh_degree > 4 {
            return Err(Error::Config("sh_degree must be in 1..=4".into()));
        }
        let grid = HashGrid::new(config.grid.clone())?;
        let density_mlp = Mlp::new(
            grid.output_dim(),
            &config.density_hidden,
            1 + config.geo_feature_dim,
            config.activation,
            Activation::Identity,
        );
        let color_mlp = Mlp::new(
            config.geo_feature_dim + config.sh_degree * config.sh_degree,
            &config.color_hidden,
            3,
            config.activation,
            Activation::Identity,
        );
        Ok((grid, density_mlp, color_mlp))
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Size of the MLP part of the parameter vector (everything after the grid tables).
    pub fn mlp_param_count(&self) -> usize {
        self.density_mlp.param_count() + self.color_mlp.param_count()
    }

    pub fn grid_params(&self) -> &[T] {
        &self.params[..self.grid.param_count()]
    }

    fn split_params(&self) -> (&[T], &[T], &[T]) {
        let g = self.grid.param_count();
        let d = g + self.density_mlp.param_count();
        (&self.params[..g], &self.params[g..d], &self.params[d..])
    }

    pub fn contract_points(&self, pts: &[Vec3]) -> Vec<[T; 3]> {
        contract_all(&self.config.contraction, pts)
    }

    pub fn full_mask(&self) -> LevelMask {
        LevelMask::all(&self.grid)
    }

    fn encode(&self, points: &[[T; 3]], mask: LevelMask) -> Vec<T> {
        let mut enc = vec![T::zero(); points.len() * self.grid.output_dim()];
        self.grid.encode_batch(self.grid_params(), points, mask, &mut enc);
        enc
    }

    #[inline]
    fn activate_density(raw: T) -> T {
        raw.min(T::lit(MAX_DENSITY.ln())).exp()
    }

    /// Density only, for points already in the encoder domain. No tape is kept.
    pub fn density(&self, points: &[[T; 3]], mask: LevelMask) -> Vec<T> {
        if points.is_empty() {
            return Vec::new();
        }
        let (_, dp, _) = self.split_params();
        let enc = self.encode(points, mask);
        let tape = self.density_mlp.forward(dp, &enc, points.len());
        let width = self.density_mlp.outputs();
        tape.output()
            .chunks_exact(width)
            .map(|row| Self::activate_density(row[0]))
            .collect()
    }

    /// Density and colour for points already in the encoder domain.
    pub fn forward(&self, points: &[[T; 3]], dirs: &[[T; 3]], mask: LevelMask) -> RadianceTape<T> {
        debug_assert_eq!(points.len(), dirs.len());
        let n = points.len();
        let (_, dp, cp) = self.split_params();
        let enc = self.encode(points, mask);
        let density = self.density_mlp.forward(dp, &enc, n);
        let dw = self.density_mlp.outputs();
        let geo = self.config.geo_feature_dim;
        let sh_n = self.config.sh_degree * self.config.sh_degree;
        let cin = geo + sh_n;
        let mut raw_sigma = Vec::with_capacity(n);
        let mut color_in = vec![T::zero(); n * cin];
        for (i, row) in density.output().chunks_exact(dw).enumerate() {
            raw_sigma.push(row[0]);
            let dst = &mut color_in[i * cin..(i + 1) * cin];
            dst[..geo].copy_from_slice(&row[1..]);
            sh_encode(&dirs[i], self.config.sh_degree, &mut dst[geo..]);
        }
        let color = self.color_mlp.forward(cp, &color_in, n);
        let sigma = raw_sigma.iter().map(|r| Self::activate_density(*r)).collect();
        let color_out = color.output().iter().map(|v| sigmoid(*v)).collect();
        RadianceTape {
            points: points.to_vec(),
            mask,
            density,
            color,
            raw_sigma,
            sigma,
            color_out,
        }
    }

    /// MLP half of the backward pass. `mlp_grad` covers the density and colour MLP
    /// parameters (length [`Self::mlp_param_count`]); returns the gradient with respect to
    /// the grid encodings, to be scattered with [`Self::scatter_grid_gradient`].
    pub fn backward_mlps(&self, tape: &RadianceTape<T>, d_sigma: &[T], d_color: &[T], mlp_grad: &mut [T]) -> Vec<T> {
        let n = tape.len();
        let (_, dp, cp) = self.split_params();
        let (g_dens, g_col) = mlp_grad.split_at_mut(self.density_mlp.param_count());
        let geo = self.config.geo_feature_dim;
        let cin = self.color_mlp.inputs();
        let mut d_color_raw = vec![T::zero(); n * 3];
        for ((d, c), up) in d_color_raw.iter_mut().zip(&tape.color_out).zip(d_color) {
            *d = *up * *c * (T::one() - *c);
        }
        let d_color_in = self
            .color_mlp
            .backward(cp, &tape.color, &d_color_raw, g_col, true)
            .expect("input gradient requested");
        let dw = self.density_mlp.outputs();
        let cap = T::lit(MAX_DENSITY.ln());
        let mut d_density_out = vec![T::zero(); n * dw];
        for i in 0..n {
            let row = &mut d_density_out[i * dw..(i + 1) * dw];
            row[0] = if tape.raw_sigma[i] < cap {
                d_sigma[i] * tape.sigma[i]
            } else {
                T::zero()
            };
            row[1..].copy_from_slice(&d_color_in[i * cin..i * cin + geo]);
        }
        self.density_mlp
            .backward(dp, &tape.density, &d_density_out, g_dens, true)
            .expect("input gradient requested")
    }

    /// Single-writer accumulation of encoding gradients into the grid part of `grad`.
    pub fn scatter_grid_gradient(&self, grad: &mut [T], points: &[[T; 3]], mask: LevelMask, d_enc: &[T]) {
        let g = self.grid.param_count();
        self.grid.accumulate_gradient(&mut grad[..g], points, mask, d_enc);
    }

    /// Full backward pass accumulating into `grad` (same layout as `params`).
    pub fn backward(&self, tape: &RadianceTape<T>, d_sigma: &[T], d_color: &[T], grad: &mut [T]) {
        let g = self.grid.param_count();
        let d_enc = self.backward_mlps(tape, d_sigma, d_color, &mut grad[g..]);
        self.scatter_grid_gradient(grad, &tape.points, tape.mask, &d_enc);
    }

    /// Backward pass for a density-only objective (no colour gradient).
    pub fn backward_density(&self, tape: &RadianceTape<T>, d_sigma: &[T], grad: &mut [T]) {
        let zeros = vec![T::zero(); tape.len() * 3];
        self.backward(tape, d_sigma, &zeros, grad);
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("radiance field parameters".into()))
        }
    }

    pub fn cast<U: Real>(&self) -> RadianceField<U> {
        RadianceField {
            config: self.config.clone(),
            grid: self.grid.clone(),
            density_mlp: self.density_mlp.clone(),
            color_mlp: self.color_mlp.clone(),
            params: self.params.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Evaluates density and colour at a single world point.
pub fn eval_radiance<T: Real>(x: Vec3, d: Vec3, field: &RadianceField<T>, mask: LevelMask) -> Result<(f64, [f64; 3])> {
    let p = field.contract_points(&[x]);
    let dir = [d.0.map(T::lit)];
    let tape = field.forward(&p, &dir, mask);
    let sigma = tape.sigma[0].as_f64();
    let color = [tape.color_out[0].as_f64(), tape.color_out[1].as_f64(), tape.color_out[2].as_f64()];
    if !sigma.is_finite() || color.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("radiance field evaluation".into()));
    }
    Ok((sigma, color))
}

/// Object field: hash grid → MLP → softmax over `num_slots` slots. Depends on position only.
#[derive(Clone, Debug)]
pub struct ObjectField<T> {
    pub config: ObjectConfig,
    pub grid: HashGrid,
    pub mlp: Mlp,
    pub num_slots: usize,
    pub params: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ObjectTape<T> {
    pub points: Vec<[T; 3]>,
    pub mask: LevelMask,
    mlp: MlpTape<T>,
    /// Row-major `batch x num_slots`.
    pub probs: Vec<T>,
}

impl<T: Real> ObjectTape<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<T: Real> ObjectField<T> {
    pub fn new(config: ObjectConfig, num_slots: usize, rng: &mut impl Rng) -> Result<Self> {
        let (grid, mlp) = Self::layout(&config, num_slots)?;
        let mut params = grid.init_params::<T>(rng, config.grid_init_std);
        params.extend(mlp.init_params::<T>(rng));
        Ok(ObjectField {
            config,
            grid,
            mlp,
            num_slots,
            params,
        })
    }

    pub fn from_params(config: ObjectConfig, num_slots: usize, params: Vec<T>) -> Result<Self> {
        let (grid, mlp) = Self::layout(&config, num_slots)?;
        if params.len() != grid.param_count() + mlp.param_count() {
            return Err(Error::Data("object parameter count does not match configuration".into()));
        }
        Ok(ObjectField {
            config,
            grid,
            mlp,
            num_slots,
            params,
        })
    }

    fn layout(config: &ObjectConfig, num_slots: usize) -> Result<(HashGrid, Mlp)> {
        if num_slots == 0 {
            return Err(Error::Config("object field needs at least one slot".into()));
        }
        config.contraction.validate()?;
        let grid = HashGrid::new(config.grid.clone())?;
        let mlp = Mlp::new(grid.output_dim(), &config.hidden, num_slots, config.activation, Activation::Identity);
        Ok((grid, mlp))
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn mlp_param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn grid_params(&self) -> &[T] {
        &self.params[..self.grid.param_count()]
    }

    pub fn full_mask(&self) -> LevelMask {
        LevelMask::all(&self.grid)
    }

    pub fn contract_points(&self, pts: &[Vec3]) -> Vec<[T; 3]> {
        contract_all(&self.config.contraction, pts)
    }

    /// Zeroes the final layer so every point starts at the uniform distribution.
    pub fn zero_output_layer(&mut self) {
        let g = self.grid.param_count();
        let r = self.mlp.last_layer_range();
        self.params[g + r.start..g + r.end].fill(T::zero());
    }

    /// Logits before the softmax, `batch x num_slots`.
    pub fn logits(&self, points: &[[T; 3]], mask: LevelMask) -> Vec<T> {
        self.forward_tape(points, mask).0.output().to_vec()
    }

    fn forward_tape(&self, points: &[[T; 3]], mask: LevelMask) -> (MlpTape<T>, ()) {
        let g = self.grid.param_count();
        let mut enc = vec![T::zero(); points.len() * self.grid.output_dim()];
        self.grid.encode_batch(&self.params[..g], points, mask, &mut enc);
        (self.mlp.forward(&self.params[g..], &enc, points.len()), ())
    }

    pub fn forward(&self, points: &[[T; 3]], mask: LevelMask) -> ObjectTape<T> {
        let (mlp, _) = self.forward_tape(points, mask);
        let mut probs = mlp.output().to_vec();
        for row in probs.chunks_exact_mut(self.num_slots) {
            softmax_in_place(row);
        }
        ObjectTape {
            points: points.to_vec(),
            mask,
            mlp,
            probs,
        }
    }

    /// MLP half of the backward pass; returns encoding gradients.
    pub fn backward_mlp(&self, tape: &ObjectTape<T>, d_probs: &[T], mlp_grad: &mut [T]) -> Vec<T> {
        let n = self.num_slots;
        let mut d_logits = vec![T::zero(); d_probs.len()];
        for ((dl, p), dp) in d_logits
            .chunks_exact_mut(n)
            .zip(tape.probs.chunks_exact(n))
            .zip(d_probs.chunks_exact(n))
        {
            let dot: T = p.iter().zip(dp).map(|(a, b)| *a * *b).sum();
            for k in 0..n {
                dl[k] = p[k] * (dp[k] - dot);
            }
        }
        let g = self.grid.param_count();
        self.mlp
            .backward(&self.params[g..], &tape.mlp, &d_logits, mlp_grad, true)
            .expect("input gradient requested")
    }

    pub fn scatter_grid_gradient(&self, grad: &mut [T], points: &[[T; 3]], mask: LevelMask, d_enc: &[T]) {
        let g = self.grid.param_count();
        self.grid.accumulate_gradient(&mut grad[..g], points, mask, d_enc);
    }

    pub fn backward(&self, tape: &ObjectTape<T>, d_probs: &[T], grad: &mut [T]) {
        let g = self.grid.param_count();
        let d_enc = self.backward_mlp(tape, d_probs, &mut grad[g..]);
        self.scatter_grid_gradient(grad, &tape.points, tape.mask, &d_enc);
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("object field parameters".into()))
        }
    }

    pub fn cast<U: Real>(&self) -> ObjectField<U> {
        ObjectField {
            config: self.config.clone(),
            grid: self.grid.clone(),
            mlp: self.mlp.clone(),
            num_slots: self.num_slots,
            params: self.params.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Object probability vector at a single world point.
pub fn eval_object<T: Real>(x: Vec3, field: &ObjectField<T>, mask: LevelMask) -> Vec<f64> {
    let p = field.contract_points(&[x]);
    field.forward(&p, mask).probs.iter().map(|v| v.as_f64()).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hash_grid::auto_dense_threshold;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_grid(levels: usize) -> HashGridConfig {
        HashGridConfig {
            num_levels: levels,
            features_per_level: 2,
            base_resolution: 2,
            per_level_scale: 1.5,
            table_size: 32,
            dense_threshold: auto_dense_threshold(32),
        }
    }

    pub(crate) fn tiny_radiance(act: Activation) -> RadianceConfig {
        RadianceConfig {
            grid: tiny_grid(3),
            density_hidden: vec![6],
            color_hidden: vec![5],
            geo_feature_dim: 3,
            sh_degree: 2,
            activation: act,
            grid_init_std: 0.5,
            contraction: ContractionConfig::default(),
        }
    }

    pub(crate) fn tiny_objects() -> ObjectConfig {
        ObjectConfig {
            grid: tiny_grid(3),
            hidden: vec![6],
            activation: Activation::Softplus,
            grid_init_std: 0.5,
            contraction: ContractionConfig::default(),
        }
    }

    fn random_dirs(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalized();
                v.0
            })
            .collect()
    }

    #[test]
    fn density_ignores_view_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = RadianceField::<f64>::new(RadianceConfig::default(), &mut rng).unwrap();
        let x = Vec3::new(0.2, -0.1, 0.4);
        let (s1, c1) = eval_radiance(x, Vec3::new(0.0, 0.0, 1.0), &field, field.full_mask()).unwrap();
        let (s2, c2) = eval_radiance(x, Vec3::new(1.0, 0.0, 0.0), &field, field.full_mask()).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(c1, c2);
        assert!(s1 >= 0.0);
    }

    #[test]
    fn zero_color_head_gives_mid_grey() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut field = RadianceField::<f64>::new(RadianceConfig::default(), &mut rng).unwrap();
        let off = field.grid.param_count() + field.density_mlp.param_count();
        let r = field.color_mlp.last_layer_range();
        field.params[off + r.start..off + r.end].fill(0.0);
        let (_, c) = eval_radiance(Vec3::new(0.5, 0.5, 0.5), Vec3::new(0.0, 1.0, 0.0), &field, field.full_mask()).unwrap();
        assert_eq!(c, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn density_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut field = RadianceField::<f64>::new(tiny_radiance(Activation::Relu), &mut rng).unwrap();
        let g = field.grid.param_count();
        let r = field.density_mlp.last_layer_range();
        // bias of the sigma output
        let bias = g + r.end - field.density_mlp.outputs();
        field.params[bias] = 50.0;
        let (s, _) = eval_radiance(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), &field, field.full_mask()).unwrap();
        assert!((s - MAX_DENSITY).abs() < 1e-6 * MAX_DENSITY);
    }

    #[test]
    fn zero_object_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut field = ObjectField::<f64>::new(ObjectConfig::default(), 6, &mut rng).unwrap();
        field.zero_output_layer();
        for _ in 0..20 {
            let x = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            for p in eval_object(x, &field, field.full_mask()) {
                assert!((p - 1.0 / 6.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-20.0..20.0)).collect();
            let mut a = logits.clone();
            let mut b: Vec<f64> = logits.iter().map(|v| v + 123.25).collect();
            softmax_in_place(&mut a);
            softmax_in_place(&mut b);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-7);
            }
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn object_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ObjectConfig {
            grid_init_std: 1.0,
            ..ObjectConfig::default()
        };
        let field = ObjectField::<f32>::new(cfg, 9, &mut rng).unwrap();
        let pts: Vec<[f32; 3]> = (0..10_000)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let tape = field.forward(&pts, field.full_mask());
        for row in tape.probs.chunks_exact(9) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        let again = field.forward(&pts, field.full_mask());
        assert_eq!(tape.probs, again.probs);
    }

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-2 * a.abs().max(b.abs()) + 1e-9
    }

    #[test]
    fn radiance_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut field = RadianceField::<f64>::new(tiny_radiance(Activation::Softplus), &mut rng).unwrap();
        assert!(field.param_count() <= 1000);
        let pts: Vec<[f64; 3]> = (0..12)
            .map(|_| [rng.random_range(-1.9..1.9), rng.random_range(-1.9..1.9), rng.random_range(-1.9..1.9)])
            .collect();
        let dirs = random_dirs(&mut rng, 12);
        let ws: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wc: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = field.full_mask();
        let objective = |f: &RadianceField<f64>| {
            let t = f.forward(&pts, &dirs, mask);
            t.sigma.iter().zip(&ws).map(|(a, b)| a * b).sum::<f64>() + t.color_out.iter().zip(&wc).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = field.forward(&pts, &dirs, mask);
        let mut grad = vec![0.0; field.param_count()];
        field.backward(&tape, &ws, &wc, &mut grad);
        let h = 1e-3;
        for i in 0..field.param_count() {
            let orig = field.params[i];
            field.params[i] = orig + h;
            let up = objective(&field);
            field.params[i] = orig - h;
            let down = objective(&field);
            field.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_close(fd, grad[i]), "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn object_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ObjectConfig {
            grid: tiny_grid(3),
            hidden: vec![6, 5],
            activation: Activation::Softplus,
            grid_init_std: 0.5,
            contraction: ContractionConfig::default(),
        };
        let mut field = ObjectField::<f64>::new(cfg, 4, &mut rng).unwrap();
        let pts: Vec<[f64; 3]> = (0..10)
            .map(|_| [rng.random_range(-1.9..1.9), rng.random_range(-1.9..1.9), rng.random_range(-1.9..1.9)])
            .collect();
        let w: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = field.full_mask();
        let objective = |f: &ObjectField<f64>| f.forward(&pts, mask).probs.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let tape = field.forward(&pts, mask);
        let mut grad = vec![0.0; field.param_count()];
        field.backward(&tape, &w, &mut grad);
        let h = 1e-3;
        for i in 0..field.param_count() {
            let orig = field.params[i];
            field.params[i] = orig + h;
            let up = objective(&field);
            field.params[i] = orig - h;
            let down = objective(&field);
            field.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_close(fd, grad[i]), "param {i}: fd {fd} vs {}", grad[i]);
        }
    }
}
