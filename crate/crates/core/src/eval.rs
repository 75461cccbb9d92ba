//! Discrete segmentation from rendered probabilities, and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::{Bitmap, LabelImage, ProbabilityImage};
use crate::matching::{hungarian_match, AffinityMatrix};

/// Opacity below which a pixel is labelled background.
pub const OPACITY_THRESHOLD: f64 = 0.5;

/// Per-pixel argmax over slots, stored as `slot + 1`; 0 marks background.
/// Ties go to the lowest slot.
pub fn segment(probs: &ProbabilityImage) -> LabelImage {
    let px = probs.pixels();
    let mut out = LabelImage::new(probs.width, probs.height);
    for p in 0..px {
        if probs.num_slots == 0 || probs.opacity[p] < OPACITY_THRESHOLD {
            continue;
        }
        let mut best = 0;
        for n in 1..probs.num_slots {
            if probs.value(n, p) > probs.value(best, p) {
                best = n;
            }
        }
        out.data[p] = best as u32 + 1;
    }
    out
}

/// Per-pixel maximum over slots.
pub fn confidence_map(probs: &ProbabilityImage) -> Vec<f64> {
    (0..probs.pixels())
        .map(|p| (0..probs.num_slots).map(|n| probs.value(n, p)).fold(0.0, f64::max))
        .collect()
}

pub fn mean_confidence(probs: &ProbabilityImage) -> f64 {
    let c = confidence_map(probs);
    c.iter().sum::<f64>() / c.len().max(1) as f64
}

pub fn iou(a: &Bitmap, b: &Bitmap) -> f64 {
    let u = a.union_area(b);
    if u == 0 {
        0.0
    } else {
        a.intersection_area(b) as f64 / u as f64
    }
}

pub fn dice(a: &Bitmap, b: &Bitmap) -> f64 {
    let s = a.area() + b.area();
    if s == 0 {
        0.0
    } else {
        2.0 * a.intersection_area(b) as f64 / s as f64
    }
}

/// One mask per distinct label; label 0 is dropped unless `keep_background`.
pub fn label_masks(labels: &LabelImage, keep_background: bool) -> Vec<(u32, Bitmap)> {
    labels
        .labels()
        .into_iter()
        .filter(|l| keep_background || *l != 0)
        .map(|l| (l, labels.mask_of(l)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMatching {
    /// Each ground-truth mask takes its best prediction; predictions may be reused.
    #[default]
    NonExclusive,
    /// One-to-one assignment maximising the area-weighted sum.
    Exclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub matching: IouMatching,
    /// Treat label 0 of the ground truth (and of predictions) as an ordinary mask. Enable only
    /// when the ground truth annotates background as a mask of its own.
    pub include_background: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            matching: IouMatching::NonExclusive,
            include_background: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskBreakdown {
    pub label: u32,
    pub area: usize,
    pub best_iou: f64,
}

/// Area-weighted IoU of the ground-truth masks against their matched predictions,
/// with the per-mask scores.
pub fn weighted_iou_breakdown(pred: &LabelImage, gt: &LabelImage, opts: &MetricOptions) -> Result<(f64, Vec<MaskBreakdown>)> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(shape_err(format!("{}x{}", gt.height, gt.width), format!("{}x{}", pred.height, pred.width)));
    }
    let g = label_masks(gt, opts.include_background);
    if g.is_empty() {
        return Err(Error::UndefinedMetric("ground truth has no masks".into()));
    }
    let p = label_masks(pred, opts.include_background);
    let table: Vec<Vec<f64>> = g.iter().map(|(_, gm)| p.iter().map(|(_, pm)| iou(gm, pm)).collect()).collect();
    let best: Vec<f64> = match opts.matching {
        IouMatching::NonExclusive => table.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect(),
        IouMatching::Exclusive => exclusive_best(&g, &table)?,
    };
    let total: usize = g.iter().map(|(_, m)| m.area()).sum();
    let breakdown: Vec<MaskBreakdown> = g
        .iter()
        .zip(&best)
        .map(|((l, m), b)| MaskBreakdown {
            label: *l,
            area: m.area(),
            best_iou: *b,
        })
        .collect();
    let score = breakdown.iter().map(|b| b.area as f64 * b.best_iou).sum::<f64>() / total as f64;
    Ok((score, breakdown))
}

fn exclusive_best(g: &[(u32, Bitmap)], table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    let mut best = vec![0.0; rows];
    if cols == 0 {
        return Ok(best);
    }
    let total: f64 = g.iter().map(|(_, m)| m.area() as f64).sum();
    let w = |r: usize, c: usize| g[r].1.area() as f64 / total * table[r][c];
    if rows <= cols {
        let aff = AffinityMatrix::new(rows, cols, (0..rows * cols).map(|i| w(i / cols, i % cols)).collect())?;
        for (r, c) in hungarian_match(&aff)?.gamma.into_iter().enumerate() {
            best[r] = table[r][c];
        }
    } else {
        let aff = AffinityMatrix::new(cols, rows, (0..rows * cols).map(|i| w(i % rows, i / rows)).collect())?;
        for (c, r) in hungarian_match(&aff)?.gamma.into_iter().enumerate() {
            best[r] = table[r][c];
        }
    }
    Ok(best)
}

pub fn weighted_iou(pred: &LabelImage, gt: &LabelImage, opts: &MetricOptions) -> Result<f64> {
    Ok(weighted_iou_breakdown(pred, gt, opts)?.0)
}

/// `(1/|P|) Σ_p max_g Dice(p, g)`.
pub fn best_dice(p: &[Bitmap], g: &[Bitmap]) -> Result<f64> {
    if p.is_empty() || g.is_empty() {
        return Err(Error::UndefinedMetric("best Dice needs two nonempty mask sets".into()));
    }
    Ok(p.iter().map(|a| g.iter().map(|b| dice(a, b)).fold(0.0, f64::max)).sum::<f64>() / p.len() as f64)
}

pub fn sbd(p: &[Bitmap], g: &[Bitmap]) -> Result<f64> {
    Ok(best_dice(p, g)?.min(best_dice(g, p)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view_id: String,
    pub weighted_iou: f64,
    pub bd: f64,
    pub sbd: f64,
    pub mean_confidence: f64,
    pub masks: Vec<MaskBreakdown>,
}

/// Scores one rendered view against its ground-truth label map.
pub fn evaluate_view(view_id: &str, probs: &ProbabilityImage, gt: &LabelImage, opts: &MetricOptions) -> Result<ViewMetrics> {
    let pred = segment(probs);
    let (w, masks) = weighted_iou_breakdown(&pred, gt, opts)?;
    let p: Vec<Bitmap> = label_masks(&pred, opts.include_background).into_iter().map(|(_, m)| m).collect();
    let g: Vec<Bitmap> = label_masks(gt, opts.include_background).into_iter().map(|(_, m)| m).collect();
    let (bd, sbd) = if p.is_empty() { (0.0, 0.0) } else { (best_dice(&p, &g)?, sbd(&p, &g)?) };
    Ok(ViewMetrics {
        view_id: view_id.into(),
        weighted_iou: w,
        bd,
        sbd,
        mean_confidence: mean_confidence(probs),
        masks,
    })
}

/// Averages over evaluated views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub weighted_iou: f64,
    pub bd: f64,
    pub sbd: f64,
    pub mean_confidence: f64,
    pub views: Vec<ViewMetrics>,
}

impl MetricReport {
    pub fn from_views(views: Vec<ViewMetrics>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::UndefinedMetric("no views evaluated".into()));
        }
        let n = views.len() as f64;
        let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            weighted_iou: mean(|v| v.weighted_iou),
            bd: mean(|v| v.bd),
            sbd: mean(|v| v.sbd),
            mean_confidence: mean(|v| v.mean_confidence),
            views,
        })
    }

    /// `key = value` lines, readable as TOML.
    pub fn to_key_value(&self) -> String {
        format!(
            "weighted_iou = {:.6}\nbd = {:.6}\nsbd = {:.6}\nmean_confidence = {:.6}\nviews = {}\n",
            self.weighted_iou,
            self.bd,
            self.sbd,
            self.mean_confidence,
            self.views.len()
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "weighted IoU     {:.4}\nbest Dice        {:.4}\nsymmetric BD     {:.4}\nmean confidence  {:.4}\n\n",
            self.weighted_iou, self.bd, self.sbd, self.mean_confidence
        );
        for v in &self.views {
            s.push_str(&format!("{}: wIoU {:.4}  BD {:.4}  SBD {:.4}\n", v.view_id, v.weighted_iou, v.bd, v.sbd));
            for m in &v.masks {
                s.push_str(&format!("    label {:>3}  area {:>6}  IoU {:.4}\n", m.label, m.area, m.best_iou));
            }
        }
        s
    }
}
