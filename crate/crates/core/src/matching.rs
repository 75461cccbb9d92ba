//! Soft-IoU affinity between rendered slot channels and masks, and the optimal injective
//! mask-to-slot assignment.

use crate::error::{Error, Result};
use crate::image::{Bitmap, ProbabilityImage};
use crate::masks::MaskSet;

/// `Σ min(O, M) / Σ max(O, M)`; 0 when both are empty.
pub fn affinity(slot_image: &[f64], mask: &Bitmap) -> Result<f64> {
    if slot_image.len() != mask.data.len() {
        return Err(Error::ShapeMismatch {
            expected: mask.data.len().to_string(),
            actual: slot_image.len().to_string(),
        });
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (o, m) in slot_image.iter().zip(&mask.data) {
        let o = *o;
        if *m {
            num += o.min(1.0);
            den += o.max(1.0);
        } else {
            num += o.min(0.0);
            den += o.max(0.0);
        }
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// `K x N` affinities, masks along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols}"),
                actual: values.len().to_string(),
            });
        }
        Ok(AffinityMatrix { rows, cols, values })
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.values[m * self.cols + n]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.cols..(m + 1) * self.cols]
    }
}

pub fn affinity_matrix(probs: &ProbabilityImage, masks: &MaskSet) -> Result<AffinityMatrix> {
    let mut values = Vec::with_capacity(masks.len() * probs.num_slots);
    for m in &masks.masks {
        for n in 0..probs.num_slots {
            values.push(affinity(probs.channel(n), &m.bitmap)?);
        }
    }
    AffinityMatrix::new(masks.len(), probs.num_slots, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingResult {
    /// `gamma[m]` is the slot assigned to mask `m`.
    pub gamma: Vec<usize>,
    pub total_affinity: f64,
}

fn total(aff: &AffinityMatrix, gamma: &[usize]) -> f64 {
    gamma.iter().enumerate().map(|(m, n)| aff.get(m, *n)).sum()
}

/// Maximum-affinity injective assignment (Hungarian algorithm on costs `1 - α`).
///
/// Rows beyond `K` behave as zero-affinity virtual masks, which is equivalent to solving the
/// rectangular problem directly. Among equal-cost choices the lowest slot index wins.
pub fn hungarian_match(aff: &AffinityMatrix) -> Result<MatchingResult> {
    let (k, n) = (aff.rows, aff.cols);
    if k > n {
        return Err(Error::Capacity { masks: k, slots: n });
    }
    if k == 0 {
        return Ok(MatchingResult {
            gamma: Vec::new(),
            total_affinity: 0.0,
        });
    }
    let cost = |i: usize, j: usize| 1.0 - aff.get(i - 1, j - 1);
    let mut u = vec![0.0f64; k + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut gamma = vec![0usize; k];
    for j in 1..=n {
        if p[j] != 0 {
            gamma[p[j] - 1] = j - 1;
        }
    }
    let total_affinity = total(aff, &gamma);
    Ok(MatchingResult { gamma, total_affinity })
}

/// Per-mask argmax without the injectivity constraint (ablation baseline). Several masks may
/// share a slot.
pub fn argmax_match(aff: &AffinityMatrix) -> MatchingResult {
    let gamma: Vec<usize> = (0..aff.rows)
        .map(|m| {
            let row = aff.row(m);
            let mut best = 0;
            for (n, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = n;
                }
            }
            best
        })
        .collect();
    let total_affinity = total(aff, &gamma);
    MatchingResult { gamma, total_affinity }
}
