//! Multiresolution hash-grid encoding over the contracted domain `[-2, 2]^3`.
//!
//! Each level is a lattice with `resolution` cells per axis (`resolution + 1` vertices).
//! Coarse levels whose vertex count fits the table are stored densely; finer levels are
//! hashed into `table_size` entries. Features live in a flat parameter slice laid out
//! level by level, entry-major (`entry * features_per_level + f`).

use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Half-width of the cube the encoder covers.
pub const DOMAIN_BOUND: f64 = 2.0;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub num_levels: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    /// Entries per hashed level; must be a power of two.
    pub table_size: usize,
    /// Levels with at most this many cells per axis are stored densely.
    pub dense_threshold: usize,
}

impl HashGridConfig {
    /// 16 levels: the radiance-field encoder.
    pub fn radiance_default() -> Self {
        Self::with_levels(16)
    }

    /// 8 levels: the object-field encoder.
    pub fn object_default() -> Self {
        Self::with_levels(8)
    }

    pub fn with_levels(num_levels: usize) -> Self {
        let table_size = 1 << 19;
        HashGridConfig {
            num_levels,
            features_per_level: 2,
            base_resolution: 16,
            per_level_scale: 1.447,
            table_size,
            dense_threshold: auto_dense_threshold(table_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::Config("hash grid needs at least one level".into()));
        }
        if self.features_per_level == 0 || self.base_resolution == 0 {
            return Err(Error::Config("hash grid features and base resolution must be positive".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!("table_size {} is not a power of two", self.table_size)));
        }
        if !(self.per_level_scale > 1.0) {
            return Err(Error::Config("per_level_scale must exceed 1".into()));
        }
        Ok(())
    }

    pub fn resolution(&self, level: usize) -> usize {
        ((self.base_resolution as f64) * self.per_level_scale.powi(level as i32)).floor() as usize
    }

    pub fn output_dim(&self) -> usize {
        self.num_levels * self.features_per_level
    }
}

/// Largest resolution whose `(res + 1)^3` vertices fit in `table_size` entries.
pub fn auto_dense_threshold(table_size: usize) -> usize {
    let mut r = 1usize;
    while (r + 2).pow(3) <= table_size {
        r += 1;
    }
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelInfo {
    pub resolution: usize,
    pub dense: bool,
    pub entries: usize,
    /// Scalar offset of this level's table within the grid's parameter slice.
    pub offset: usize,
}

impl LevelInfo {
    #[inline]
    fn entry(&self, i: usize, j: usize, k: usize, table_mask: usize) -> usize {
        if self.dense {
            let v = self.resolution + 1;
            i + v * (j + v * k)
        } else {
            let h = (i as u32).wrapping_mul(PRIMES[0])
                ^ (j as u32).wrapping_mul(PRIMES[1])
                ^ (k as u32).wrapping_mul(PRIMES[2]);
            (h as usize) & table_mask
        }
    }
}

/// Resolved level layout of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub config: HashGridConfig,
    pub levels: Vec<LevelInfo>,
    param_count: usize,
}

/// Coarse-to-fine activation: the first `active_levels` levels contribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelMask {
    pub active_levels: usize,
}

impl LevelMask {
    pub fn all(grid: &HashGrid) -> Self {
        LevelMask {
            active_levels: grid.config.num_levels,
        }
    }

    pub fn new(active_levels: usize, grid: &HashGrid) -> Result<Self> {
        if active_levels == 0 || active_levels > grid.config.num_levels {
            return Err(Error::InvalidInput(format!(
                "active levels {active_levels} outside [1, {}]",
                grid.config.num_levels
            )));
        }
        Ok(LevelMask { active_levels })
    }
}

/// Trilinear corner lookup for one point on one level.
#[derive(Clone, Copy, Debug)]
pub struct Corners<T> {
    pub entries: [usize; 8],
    pub weights: [T; 8],
}

impl HashGrid {
    pub fn new(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let mut offset = 0;
        let mut levels = Vec::with_capacity(config.num_levels);
        for l in 0..config.num_levels {
            let resolution = config.resolution(l).max(1);
            let dense = resolution <= config.dense_threshold;
            let entries = if dense {
                (resolution + 1).pow(3)
            } else {
                config.table_size
            };
            levels.push(LevelInfo {
                resolution,
                dense,
                entries,
                offset,
            });
            offset += entries * config.features_per_level;
        }
        Ok(HashGrid {
            config,
            levels,
            param_count: offset,
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    #[inline]
    fn table_mask(&self) -> usize {
        self.config.table_size - 1
    }

    /// Truncated-normal (±2σ) initialisation with σ = `std`.
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng, std: f64) -> Vec<T> {
        (0..self.param_count)
            .map(|_| T::lit(truncated_normal(rng) * std))
            .collect()
    }

    /// Corner entries and trilinear weights of `x` on `level`. Points outside the domain
    /// are clamped onto its boundary.
    #[inline]
    pub fn corners<T: Real>(&self, level: usize, x: &[T; 3]) -> Corners<T> {
        let info = &self.levels[level];
        let res = info.resolution;
        let bound = T::lit(DOMAIN_BOUND);
        let scale = T::lit(res as f64 / (2.0 * DOMAIN_BOUND));
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let mut v = x[a];
            if !(v >= -bound && v <= bound) {
                if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
                    log::warn!("hash grid: point outside [-2, 2]^3 clamped to the domain boundary");
                }
                v = if v.is_nan() { T::zero() } else { v.max(-bound).min(bound) };
            }
            let pos = (v + bound) * scale;
            let mut cell = pos.floor().to_usize().unwrap_or(0);
            if cell >= res {
                cell = res - 1;
            }
            base[a] = cell;
            frac[a] = pos - T::lit(cell as f64);
        }
        let mask = self.table_mask();
        let mut entries = [0usize; 8];
        let mut weights = [T::zero(); 8];
        for c in 0..8 {
            let (di, dj, dk) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            entries[c] = info.entry(base[0] + di, base[1] + dj, base[2] + dk, mask);
            let wx = if di == 1 { frac[0] } else { T::one() - frac[0] };
            let wy = if dj == 1 { frac[1] } else { T::one() - frac[1] };
            let wz = if dk == 1 { frac[2] } else { T::one() - frac[2] };
            weights[c] = wx * wy * wz;
        }
        Corners { entries, weights }
    }

    /// Encodes one point into `out` (`num_levels * features_per_level` values). Inactive
    /// levels write exact zeros.
    pub fn encode<T: Real>(&self, params: &[T], x: &[T; 3], mask: LevelMask, out: &mut [T]) {
        let f = self.config.features_per_level;
        debug_assert_eq!(out.len(), self.output_dim());
        for (l, info) in self.levels.iter().enumerate() {
            let dst = &mut out[l * f..(l + 1) * f];
            if l >= mask.active_levels {
                dst.fill(T::zero());
                continue;
            }
            let corners = self.corners(l, x);
            dst.fill(T::zero());
            let table = &params[info.offset..info.offset + info.entries * f];
            for c in 0..8 {
                let w = corners.weights[c];
                let e = corners.entries[c] * f;
                for (d, v) in dst.iter_mut().zip(&table[e..e + f]) {
                    *d += w * *v;
                }
            }
        }
    }

    pub fn encode_batch<T: Real>(&self, params: &[T], xs: &[[T; 3]], mask: LevelMask, out: &mut [T]) {
        let dim = self.output_dim();
        debug_assert_eq!(out.len(), xs.len() * dim);
        for (x, row) in xs.iter().zip(out.chunks_exact_mut(dim)) {
            self.encode(params, x, mask, row);
        }
    }

    /// Accumulates `d_out` (gradient w.r.t. the encodings of `xs`) into `grad`.
    ///
    /// This is the single-writer accumulation step: callers running forward passes in
    /// parallel must serialise calls that target the same `grad` buffer.
    pub fn accumulate_gradient<T: Real>(&self, grad: &mut [T], xs: &[[T; 3]], mask: LevelMask, d_out: &[T]) {
        let f = self.config.features_per_level;
        let dim = self.output_dim();
        debug_assert_eq!(d_out.len(), xs.len() * dim);
        for (x, drow) in xs.iter().zip(d_out.chunks_exact(dim)) {
            for (l, info) in self.levels.iter().enumerate().take(mask.active_levels) {
                let dl = &drow[l * f..(l + 1) * f];
                if dl.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                let corners = self.corners(l, x);
                for c in 0..8 {
                    let w = corners.weights[c];
                    let e = info.offset + corners.entries[c] * f;
                    for (g, d) in grad[e..e + f].iter_mut().zip(dl) {
                        *g += w * *d;
                    }
                }
            }
        }
    }

    fn pair_term<T: Real>(&self, params: &[T], info: &LevelInfo, a: usize, b: usize) -> T {
        let f = self.config.features_per_level;
        let (pa, pb) = (info.offset + a * f, info.offset + b * f);
        (0..f)
            .map(|k| {
                let d = params[pa + k] - params[pb + k];
                d * d
            })
            .sum()
    }

    fn pair_grad<T: Real>(&self, params: &[T], grad: &mut [T], info: &LevelInfo, a: usize, b: usize, scale: T) {
        let f = self.config.features_per_level;
        let (pa, pb) = (info.offset + a * f, info.offset + b * f);
        for k in 0..f {
            let g = T::lit(2.0) * scale * (params[pa + k] - params[pb + k]);
            grad[pa + k] += g;
            grad[pb + k] -= g;
        }
    }

    /// Mean squared feature difference over every axis-adjacent vertex pair of `level`'s
    /// lattice; on hashed levels both endpoints go through the hash.
    pub fn level_tv_exhaustive<T: Real>(&self, params: &[T], level: usize, grad: Option<&mut [T]>, weight: T) -> T {
        let info = &self.levels[level];
        let res = info.resolution;
        let v = res + 1;
        let mask = self.table_mask();
        let pairs = 3 * res * v * v;
        let norm = T::one() / T::lit(pairs as f64);
        let mut sum = T::zero();
        let mut grad = grad;
        for k in 0..v {
            for j in 0..v {
                for i in 0..v {
                    let a = info.entry(i, j, k, mask);
                    let nbrs = [(i + 1, j, k, i < res), (i, j + 1, k, j < res), (i, j, k + 1, k < res)];
                    for (ni, nj, nk, ok) in nbrs {
                        if !ok {
                            continue;
                        }
                        let b = info.entry(ni, nj, nk, mask);
                        sum += self.pair_term(params, info, a, b);
                        if let Some(g) = grad.as_deref_mut() {
                            self.pair_grad(params, g, info, a, b, weight * norm);
                        }
                    }
                }
            }
        }
        sum * norm
    }

    /// Unbiased estimate of [`Self::level_tv_exhaustive`] from `samples` uniformly drawn
    /// adjacent pairs.
    pub fn level_tv_sampled<T: Real>(
        &self,
        params: &[T],
        level: usize,
        samples: usize,
        rng: &mut impl Rng,
        grad: Option<&mut [T]>,
        weight: T,
    ) -> T {
        let info = &self.levels[level];
        let res = info.resolution;
        let mask = self.table_mask();
        let norm = T::one() / T::lit(samples.max(1) as f64);
        let mut sum = T::zero();
        let mut grad = grad;
        for _ in 0..samples {
            let axis = rng.random_range(0..3usize);
            let mut c = [0usize; 3];
            for (a, v) in c.iter_mut().enumerate() {
                *v = if a == axis {
                    rng.random_range(0..res)
                } else {
                    rng.random_range(0..=res)
                };
            }
            let mut n = c;
            n[axis] += 1;
            let a = info.entry(c[0], c[1], c[2], mask);
            let b = info.entry(n[0], n[1], n[2], mask);
            sum += self.pair_term(params, info, a, b);
            if let Some(g) = grad.as_deref_mut() {
                self.pair_grad(params, g, info, a, b, weight * norm);
            }
        }
        sum * norm
    }
}

/// Pair sampler for the total-variation regulariser on hashed levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvSampler {
    pub pairs_per_level: usize,
}

impl Default for TvSampler {
    fn default() -> Self {
        TvSampler { pairs_per_level: 4096 }
    }
}

/// Total-variation regulariser: sum over levels of the mean squared difference between
/// axis-adjacent voxel features. Exact on dense levels, pair-sampled on hashed ones.
///
/// When `grad` is given, `weight * dL/dparams` is accumulated into it.
pub fn tv_loss<T: Real>(
    grid: &HashGrid,
    params: &[T],
    sampler: &TvSampler,
    seed: u64,
    mut grad: Option<&mut [T]>,
    weight: T,
) -> T {
    let mut total = T::zero();
    for (l, info) in grid.levels.iter().enumerate() {
        let term = if info.dense {
            grid.level_tv_exhaustive(params, l, grad.as_deref_mut(), weight)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(l as u64 + 1)));
            grid.level_tv_sampled(params, l, sampler.pairs_per_level, &mut rng, grad.as_deref_mut(), weight)
        };
        total += term;
    }
    total
}

pub(crate) fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = rng.sample(rand_distr::StandardNormal);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(levels: usize, base: usize, table: usize) -> HashGridConfig {
        HashGridConfig {
            num_levels: levels,
            features_per_level: 2,
            base_resolution: base,
            per_level_scale: 1.5,
            table_size: table,
            dense_threshold: auto_dense_threshold(table),
        }
    }

    fn random_params(grid: &HashGrid, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..grid.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Oracle: enumerates the 8 lattice corners explicitly and multiplies out the weights.
    fn encode_oracle(grid: &HashGrid, params: &[f64], x: [f64; 3], active: usize) -> Vec<f64> {
        let f = grid.config.features_per_level;
        let mut out = vec![0.0; grid.output_dim()];
        for (l, info) in grid.levels.iter().enumerate().take(active) {
            let res = info.resolution as f64;
            let p: Vec<f64> = x.iter().map(|v| (v + 2.0) / 4.0 * res).collect();
            let b: Vec<f64> = p.iter().map(|v| v.floor().min(res - 1.0)).collect();
            for dx in 0..2 {
                for dy in 0..2 {
                    for dz in 0..2 {
                        let (i, j, k) = (b[0] as usize + dx, b[1] as usize + dy, b[2] as usize + dz);
                        let wx = 1.0 - (p[0] - (i as f64)).abs();
                        let wy = 1.0 - (p[1] - (j as f64)).abs();
                        let wz = 1.0 - (p[2] - (k as f64)).abs();
                        let e = if info.dense {
                            let v = info.resolution + 1;
                            i + v * j + v * v * k
                        } else {
                            let h = (i as u32) ^ (j as u32).wrapping_mul(2_654_435_761) ^ (k as u32).wrapping_mul(805_459_861);
                            (h as usize) % grid.config.table_size
                        };
                        for q in 0..f {
                            out[l * f + q] += wx * wy * wz * params[info.offset + e * f + q];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn layout_mixes_dense_and_hashed_levels() {
        let grid = HashGrid::new(tiny_config(4, 4, 256)).unwrap();
        let dense: Vec<bool> = grid.levels.iter().map(|l| l.dense).collect();
        assert_eq!(grid.levels.iter().map(|l| l.resolution).collect::<Vec<_>>(), vec![4, 6, 9, 13]);
        assert_eq!(dense, vec![true, false, false, false]);
        assert_eq!(grid.param_count(), (125 + 3 * 256) * 2);
    }

    #[test]
    fn lattice_point_returns_stored_feature() {
        let grid = HashGrid::new(tiny_config(1, 4, 1 << 10)).unwrap();
        let params = random_params(&grid, 1);
        // x = -1 sits on vertex index 1 of a 4-cell lattice over [-2, 2]
        let x = [-1.0, 0.0, 1.0];
        let corners = grid.corners(0, &x);
        assert!(corners.weights.iter().all(|w| *w == 0.0 || *w == 1.0));
        let mut out = vec![0.0; 2];
        grid.encode(&params, &x, LevelMask::all(&grid), &mut out);
        let e = 1 + 5 * 2 + 25 * 3;
        assert_eq!(out, params[e * 2..e * 2 + 2].to_vec());
    }

    #[test]
    fn edge_midpoint_averages_endpoints() {
        let grid = HashGrid::new(tiny_config(1, 4, 1 << 10)).unwrap();
        let params = random_params(&grid, 2);
        let mut out = vec![0.0; 2];
        grid.encode(&params, &[-0.5, 0.0, 1.0], LevelMask::all(&grid), &mut out);
        let a = (1 + 5 * 2 + 25 * 3) * 2;
        let b = (2 + 5 * 2 + 25 * 3) * 2;
        for q in 0..2 {
            assert!((out[q] - 0.5 * (params[a + q] + params[b + q])).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_matches_corner_enumeration_oracle() {
        let grid = HashGrid::new(tiny_config(5, 3, 512)).unwrap();
        let params = random_params(&grid, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let active = rng.random_range(1..=5);
            let mut out = vec![0.0; grid.output_dim()];
            grid.encode(&params, &x, LevelMask { active_levels: active }, &mut out);
            let oracle = encode_oracle(&grid, &params, x, active);
            for (a, b) in out.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn activating_levels_keeps_coarse_prefix() {
        let grid = HashGrid::new(tiny_config(6, 2, 256)).unwrap();
        let params = random_params(&grid, 5);
        let x = [0.31, -1.27, 1.9];
        let mut prev = vec![0.0; grid.output_dim()];
        grid.encode(&params, &x, LevelMask { active_levels: 1 }, &mut prev);
        for active in 2..=6 {
            let mut out = vec![0.0; grid.output_dim()];
            grid.encode(&params, &x, LevelMask { active_levels: active }, &mut out);
            assert_eq!(&out[..(active - 1) * 2], &prev[..(active - 1) * 2]);
            assert!(out[active * 2..].iter().all(|v| *v == 0.0));
            prev = out;
        }
    }

    #[test]
    fn out_of_domain_points_are_clamped() {
        let grid = HashGrid::new(tiny_config(2, 4, 256)).unwrap();
        let params = random_params(&grid, 6);
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        grid.encode(&params, &[5.0, -9.0, 0.2], LevelMask::all(&grid), &mut a);
        grid.encode(&params, &[2.0, -2.0, 0.2], LevelMask::all(&grid), &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let grid = HashGrid::new(tiny_config(3, 2, 64)).unwrap();
        let mut params = random_params(&grid, 7);
        let xs = [[0.3, -0.7, 1.1], [-1.9, 0.05, 0.6], [1.2, 1.3, -0.4]];
        let mask = LevelMask::all(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let upstream: Vec<f64> = (0..xs.len() * grid.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &[f64]| {
            let mut out = vec![0.0; xs.len() * grid.output_dim()];
            grid.encode_batch(p, &xs, mask, &mut out);
            out.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grad = vec![0.0; grid.param_count()];
        grid.accumulate_gradient(&mut grad, &xs, mask, &upstream);
        let h = 1e-3;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = objective(&params);
            params[i] = orig - h;
            let down = objective(&params);
            params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!((fd - grad[i]).abs() / denom < 1e-2 || (fd - grad[i]).abs() < 1e-9, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn tv_of_constant_tables_is_zero() {
        let grid = HashGrid::new(tiny_config(3, 2, 64)).unwrap();
        let params = vec![0.7f64; grid.param_count()];
        assert_eq!(tv_loss(&grid, &params, &TvSampler::default(), 3, None, 1.0), 0.0);
    }

    #[test]
    fn tv_single_voxel_on_two_cube() {
        // one level with 1 cell per axis: a 2x2x2 vertex lattice with 12 adjacent pairs
        let grid = HashGrid::new(tiny_config(1, 1, 64)).unwrap();
        assert!(grid.levels[0].dense);
        let mut params = vec![0.0f64; grid.param_count()];
        params[0] = 0.6;
        params[1] = -0.8;
        let v_sq = 0.6f64 * 0.6 + 0.8 * 0.8;
        // exhaustive oracle: vertex 0 touches exactly three of the twelve pairs
        let tv = tv_loss(&grid, &params, &TvSampler::default(), 0, None, 1.0);
        assert!((tv - 3.0 * v_sq / 12.0).abs() < 1e-15);
        let scaled: Vec<f64> = params.iter().map(|v| v * 3.0).collect();
        let tv3 = tv_loss(&grid, &scaled, &TvSampler::default(), 0, None, 1.0);
        assert!((tv3 - 9.0 * tv).abs() < 1e-12);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let grid = HashGrid::new(tiny_config(3, 2, 32)).unwrap();
        let mut params = random_params(&grid, 9);
        let sampler = TvSampler { pairs_per_level: 64 };
        let mut grad = vec![0.0; grid.param_count()];
        tv_loss(&grid, &params, &sampler, 17, Some(&mut grad), 1.0);
        let h = 1e-3;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = tv_loss(&grid, &params, &sampler, 17, None, 1.0);
            params[i] = orig - h;
            let down = tv_loss(&grid, &params, &sampler, 17, None, 1.0);
            params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-2 * fd.abs().max(grad[i].abs()) + 1e-9);
        }
    }

    #[test]
    fn sampled_tv_is_unbiased_on_small_hashed_level() {
        let grid = HashGrid::new(tiny_config(1, 6, 64)).unwrap();
        assert!(!grid.levels[0].dense);
        let params = random_params(&grid, 10);
        let exact = grid.level_tv_exhaustive(&params, 0, None, 1.0);
        let mean: f64 = (0..100)
            .map(|s| tv_loss(&grid, &params, &TvSampler::default(), s, None, 1.0))
            .sum::<f64>()
            / 100.0;
        assert!((mean - exact).abs() < 0.1 * exact, "{mean} vs {exact}");
    }
}
