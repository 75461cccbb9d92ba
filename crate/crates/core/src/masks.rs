//! Per-view mask sets: ingestion, post-processing, background masks and the synthetic
//! corruption generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::{read_mask_png, write_mask_png, Bitmap};
use crate::render::{render_pixels, RayRenderResult, SamplingConfig, VolumeSource};
use crate::seed::rng_for;

/// Quality scores a mask generator attaches to each mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScore {
    pub predicted_iou: f64,
    pub stability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub bitmap: Bitmap,
    pub score: Option<MaskScore>,
    pub is_background: bool,
}

impl Mask {
    pub fn new(bitmap: Bitmap) -> Self {
        Mask {
            bitmap,
            score: None,
            is_background: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub view_id: String,
    pub width: usize,
    pub height: usize,
    pub masks: Vec<Mask>,
    /// Set once [`postprocess`] has run, so a second pass is a no-op.
    pub processed: bool,
}

impl MaskSet {
    pub fn new(view_id: impl Into<String>, width: usize, height: usize) -> Self {
        MaskSet {
            view_id: view_id.into(),
            width,
            height,
            masks: Vec::new(),
            processed: false,
        }
    }

    pub fn from_bitmaps(view_id: impl Into<String>, width: usize, height: usize, bitmaps: Vec<Bitmap>) -> Result<Self> {
        let mut set = MaskSet::new(view_id, width, height);
        for b in bitmaps {
            set.push(Mask::new(b))?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn push(&mut self, mask: Mask) -> Result<()> {
        if mask.bitmap.width != self.width || mask.bitmap.height != self.height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.height, self.width),
                actual: format!("{}x{}", mask.bitmap.height, mask.bitmap.width),
            });
        }
        self.masks.push(mask);
        Ok(())
    }

    /// Appends a background mask flagged as such.
    pub fn with_background(mut self, background: Bitmap) -> Result<Self> {
        self.masks.retain(|m| !m.is_background);
        self.push(Mask {
            bitmap: background,
            score: None,
            is_background: true,
        })?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub min_area_frac: f64,
    pub min_score: f64,
    pub dilate_px: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            min_area_frac: 0.03,
            min_score: 0.70,
            dilate_px: 5,
        }
    }
}

/// Strict subset on pixel sets.
fn strict_subset(a: &Bitmap, b: &Bitmap) -> bool {
    let mut proper = false;
    for (x, y) in a.data.iter().zip(&b.data) {
        if *x && !*y {
            return false;
        }
        if *y && !*x {
            proper = true;
        }
    }
    proper
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Dilation by a disk of the given radius.
pub fn dilate(m: &Bitmap, radius: usize) -> Bitmap {
    if radius == 0 {
        return m.clone();
    }
    let offs = disk_offsets(radius);
    let (w, h) = (m.width as isize, m.height as isize);
    let mut out = Bitmap::new(m.width, m.height);
    for r in 0..h {
        for c in 0..w {
            if !m.get(r as usize, c as usize) {
                continue;
            }
            for (dy, dx) in &offs {
                let (y, x) = (r + dy, c + dx);
                if y >= 0 && y < h && x >= 0 && x < w {
                    out.set(y as usize, x as usize, true);
                }
            }
        }
    }
    out
}

/// Erosion by a disk; pixels beyond the image border count as set.
pub fn erode(m: &Bitmap, radius: usize) -> Bitmap {
    if radius == 0 {
        return m.clone();
    }
    let offs = disk_offsets(radius);
    let (w, h) = (m.width as isize, m.height as isize);
    Bitmap::from_fn(m.width, m.height, |r, c| {
        offs.iter().all(|(dy, dx)| {
            let (y, x) = (r as isize + dy, c as isize + dx);
            !(y >= 0 && y < h && x >= 0 && x < w) || m.get(y as usize, x as usize)
        })
    })
}

/// Containment removal, area filter, score filter, then dilation. Background masks pass
/// through untouched.
pub fn postprocess(raw: &MaskSet, cfg: &PostprocessConfig) -> MaskSet {
    if raw.processed {
        return raw.clone();
    }
    let (bg, fg): (Vec<&Mask>, Vec<&Mask>) = raw.masks.iter().partition(|m| m.is_background);
    let keep_contained: Vec<&Mask> = fg
        .iter()
        .enumerate()
        .filter(|(i, m)| {
            !fg.iter().enumerate().any(|(j, o)| {
                *i != j && (strict_subset(&m.bitmap, &o.bitmap) || (j < *i && m.bitmap == o.bitmap))
            })
        })
        .map(|(_, m)| *m)
        .collect();
    let min_area = cfg.min_area_frac * (raw.width * raw.height) as f64;
    let mut masks: Vec<Mask> = keep_contained
        .into_iter()
        .filter(|m| m.bitmap.area() as f64 >= min_area)
        .filter(|m| match m.score {
            Some(s) => s.predicted_iou >= cfg.min_score && s.stability >= cfg.min_score,
            None => true,
        })
        .map(|m| Mask {
            bitmap: dilate(&m.bitmap, cfg.dilate_px),
            ..m.clone()
        })
        .collect();
    masks.extend(bg.into_iter().cloned());
    MaskSet {
        view_id: raw.view_id.clone(),
        width: raw.width,
        height: raw.height,
        masks,
        processed: true,
    }
}

/// Pixels whose expected termination point leaves the unit ball, or whose ray mostly escapes.
pub fn background_mask<S: VolumeSource + ?Sized>(camera: &Camera, radiance: &S, cfg: &SamplingConfig) -> Result<Bitmap> {
    let results = render_pixels(camera, radiance, &cfg.deterministic(), 0, false)?;
    Ok(background_from_results(camera, &results))
}

/// [`background_mask`] from already rendered pixels (row-major, one per pixel).
pub fn background_from_results(camera: &Camera, results: &[RayRenderResult]) -> Bitmap {
    let rays: Vec<_> = (0..camera.width * camera.height)
        .map(|i| camera.pixel_direction((i / camera.width) as f64 + 0.5, (i % camera.width) as f64 + 0.5))
        .collect();
    let origin = camera.origin();
    Bitmap {
        width: camera.width,
        height: camera.height,
        data: results
            .iter()
            .zip(rays)
            .map(|(r, d)| {
                if r.opacity < 0.5 {
                    return true;
                }
                let depth = r.depth / r.opacity;
                (origin + d * depth).norm() > 1.0
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub drop_prob: f64,
    pub split_prob: f64,
    pub merge_prob: f64,
    pub jitter_px: usize,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            drop_prob: 0.2,
            split_prob: 0.3,
            merge_prob: 0.0,
            jitter_px: 2,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn none() -> Self {
        CorruptionConfig {
            drop_prob: 0.0,
            split_prob: 0.0,
            merge_prob: 0.0,
            jitter_px: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("drop_prob", self.drop_prob), ("split_prob", self.split_prob), ("merge_prob", self.merge_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn touching(a: &Bitmap, b: &Bitmap) -> bool {
    let (w, h) = (a.width, a.height);
    for r in 0..h {
        for c in 0..w {
            if !a.get(r, c) {
                continue;
            }
            if b.get(r, c)
                || (r > 0 && b.get(r - 1, c))
                || (r + 1 < h && b.get(r + 1, c))
                || (c > 0 && b.get(r, c - 1))
                || (c + 1 < w && b.get(r, c + 1))
            {
                return true;
            }
        }
    }
    false
}

fn split_by_line(m: &Bitmap, angle: f64) -> Option<(Bitmap, Bitmap)> {
    let area = m.area();
    if area < 2 {
        return None;
    }
    let (mut cy, mut cx) = (0.0, 0.0);
    for r in 0..m.height {
        for c in 0..m.width {
            if m.get(r, c) {
                cy += r as f64;
                cx += c as f64;
            }
        }
    }
    cy /= area as f64;
    cx /= area as f64;
    let (ny, nx) = (angle.sin(), angle.cos());
    let side = |r: usize, c: usize| (r as f64 - cy) * ny + (c as f64 - cx) * nx >= 0.0;
    let a = Bitmap::from_fn(m.width, m.height, |r, c| m.get(r, c) && side(r, c));
    let b = Bitmap::from_fn(m.width, m.height, |r, c| m.get(r, c) && !side(r, c));
    (!a.is_empty() && !b.is_empty()).then_some((a, b))
}

/// Drop, split, merge and boundary-jitter a view's clean masks, then shuffle their order.
/// Randomness is a function of `(cfg.seed, view_id)`.
pub fn corrupt_masks(clean: &MaskSet, cfg: &CorruptionConfig) -> Result<MaskSet> {
    cfg.validate()?;
    let mut rng = rng_for(&[cfg.seed, fnv1a(&clean.view_id)]);
    let mut masks: Vec<Bitmap> = Vec::new();
    for m in clean.masks.iter().filter(|m| !m.is_background) {
        if rng.random::<f64>() < cfg.drop_prob {
            continue;
        }
        masks.push(m.bitmap.clone());
    }
    let mut split = Vec::with_capacity(masks.len());
    for m in masks {
        if rng.random::<f64>() < cfg.split_prob {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            if let Some((a, b)) = split_by_line(&m, angle) {
                split.push(a);
                split.push(b);
                continue;
            }
        }
        split.push(m);
    }
    let mut merged: Vec<Option<Bitmap>> = split.into_iter().map(Some).collect();
    if cfg.merge_prob > 0.0 {
        for i in 0..merged.len() {
            for j in i + 1..merged.len() {
                let (Some(a), Some(b)) = (&merged[i], &merged[j]) else {
                    continue;
                };
                if touching(a, b) && rng.random::<f64>() < cfg.merge_prob {
                    let union = Bitmap {
                        width: a.width,
                        height: a.height,
                        data: a.data.iter().zip(&b.data).map(|(x, y)| *x || *y).collect(),
                    };
                    merged[i] = Some(union);
                    merged[j] = None;
                }
            }
        }
    }
    let mut out: Vec<Bitmap> = Vec::new();
    for m in merged.into_iter().flatten() {
        let m = if cfg.jitter_px > 0 {
            let j = cfg.jitter_px as i64;
            let r = rng.random_range(-j..=j);
            if r >= 0 {
                dilate(&m, r as usize)
            } else {
                erode(&m, (-r) as usize)
            }
        } else {
            m
        };
        if !m.is_empty() {
            out.push(m);
        }
    }
    out.shuffle(&mut rng);
    MaskSet::from_bitmaps(clean.view_id.clone(), clean.width, clean.height, out)
}

/// Reads `<dir>/<k>.png` masks (numeric order) plus the optional `meta.json` scores,
/// resizing to `width x height` by nearest neighbour.
pub fn load_mask_set(dir: &Path, view_id: &str, width: usize, height: usize) -> Result<MaskSet> {
    let mut files: Vec<(u64, std::path::PathBuf)> = Vec::new();
    if dir.exists() {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let k = stem
                .parse::<u64>()
                .map_err(|_| Error::Data(format!("mask file name {} is not an integer", path.display())))?;
            files.push((k, path));
        }
    }
    files.sort();
    let meta_path = dir.join("meta.json");
    let meta: BTreeMap<String, MaskScore> = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?
    } else {
        BTreeMap::new()
    };
    let mut set = MaskSet::new(view_id, width, height);
    for (k, path) in files {
        let bitmap = read_mask_png(&path)?.resized(width, height);
        set.push(Mask {
            bitmap,
            score: meta.get(&k.to_string()).copied(),
            is_background: false,
        })?;
    }
    Ok(set)
}

/// Writes non-background masks as `<dir>/<k>.png` plus `meta.json` when any score is present.
pub fn write_mask_set(dir: &Path, set: &MaskSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = BTreeMap::new();
    for (k, m) in set.masks.iter().filter(|m| !m.is_background).enumerate() {
        write_mask_png(&dir.join(format!("{k}.png")), &m.bitmap)?;
        if let Some(s) = m.score {
            meta.insert(k.to_string(), s);
        }
    }
    if !meta.is_empty() {
        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("scores serialise");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::render::tests::FnSource;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Bitmap {
        Bitmap::from_fn(w, h, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
    }

    fn no_dilation() -> PostprocessConfig {
        PostprocessConfig {
            dilate_px: 0,
            ..PostprocessConfig::default()
        }
    }

    #[test]
    fn contained_mask_is_removed() {
        let b = rect(20, 20, 2, 18, 2, 18);
        let a = rect(20, 20, 5, 10, 5, 10);
        let set = MaskSet::from_bitmaps("v", 20, 20, vec![a, b.clone()]).unwrap();
        let out = postprocess(&set, &no_dilation());
        assert_eq!(out.len(), 1);
        assert_eq!(out.masks[0].bitmap, b);
    }

    #[test]
    fn identical_masks_keep_the_first() {
        let a = rect(10, 10, 0, 5, 0, 5);
        let mut set = MaskSet::from_bitmaps("v", 10, 10, vec![a.clone(), a]).unwrap();
        set.masks[0].score = Some(MaskScore {
            predicted_iou: 0.9,
            stability: 0.8,
        });
        let out = postprocess(&set, &no_dilation());
        assert_eq!(out.len(), 1);
        assert!(out.masks[0].score.is_some());
    }

    #[test]
    fn small_masks_are_removed() {
        // 200 of 10000 pixels = 2%
        let small = rect(100, 100, 0, 10, 0, 20);
        let big = rect(100, 100, 50, 70, 50, 70);
        let set = MaskSet::from_bitmaps("v", 100, 100, vec![small, big.clone()]).unwrap();
        let out = postprocess(&set, &no_dilation());
        assert_eq!(out.len(), 1);
        assert_eq!(out.masks[0].bitmap, big);
    }

    #[test]
    fn score_threshold_keeps_boundary() {
        let mut set = MaskSet::new("v", 10, 10);
        for (i, s) in [0.6, 0.7].into_iter().enumerate() {
            set.push(Mask {
                bitmap: rect(10, 10, i * 5, i * 5 + 5, 0, 10),
                score: Some(MaskScore {
                    predicted_iou: 0.95,
                    stability: s,
                }),
                is_background: false,
            })
            .unwrap();
        }
        let out = postprocess(&set, &no_dilation());
        assert_eq!(out.len(), 1);
        assert_eq!(out.masks[0].score.unwrap().stability, 0.7);
    }

    #[test]
    fn dilation_by_disk() {
        let m = Bitmap::from_fn(11, 11, |r, c| r == 5 && c == 5);
        let d = dilate(&m, 2);
        assert_eq!(d.area(), 13);
        assert!(d.get(3, 5) && d.get(5, 7) && !d.get(3, 4));
        assert_eq!(erode(&d, 2), m);
    }

    fn arb_set() -> impl Strategy<Value = MaskSet> {
        prop::collection::vec((0usize..16, 0usize..16, 1usize..10, 1usize..10, prop::option::of((0.5f64..1.0, 0.5f64..1.0))), 0..6).prop_map(|rs| {
            let mut set = MaskSet::new("v", 16, 16);
            for (r, c, h, w, s) in rs {
                set.push(Mask {
                    bitmap: rect(16, 16, r, (r + h).min(16), c, (c + w).min(16)),
                    score: s.map(|(a, b)| MaskScore {
                        predicted_iou: a,
                        stability: b,
                    }),
                    is_background: false,
                })
                .unwrap();
            }
            set
        })
    }

    proptest! {
        #[test]
        fn postprocess_is_idempotent_and_never_grows(set in arb_set()) {
            let cfg = PostprocessConfig { dilate_px: 1, ..PostprocessConfig::default() };
            let once = postprocess(&set, &cfg);
            let twice = postprocess(&once, &cfg);
            prop_assert!(once.len() <= set.len());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn corruption_yields_valid_bitmaps(set in arb_set(), seed in 0u64..1000) {
            let cfg = CorruptionConfig { merge_prob: 0.5, seed, ..CorruptionConfig::default() };
            let out = corrupt_masks(&set, &cfg).unwrap();
            for m in &out.masks {
                prop_assert_eq!(m.bitmap.width, 16);
                prop_assert_eq!(m.bitmap.height, 16);
                prop_assert_eq!(m.bitmap.data.len(), 256);
                prop_assert!(!m.bitmap.is_empty());
            }
        }
    }

    fn disjoint_set() -> MaskSet {
        let bitmaps = vec![rect(32, 32, 0, 10, 0, 10), rect(32, 32, 12, 20, 3, 30), rect(32, 32, 22, 32, 14, 25)];
        MaskSet::from_bitmaps("view_007", 32, 32, bitmaps).unwrap()
    }

    fn sorted(set: &MaskSet) -> Vec<Vec<bool>> {
        let mut v: Vec<Vec<bool>> = set.masks.iter().map(|m| m.bitmap.data.clone()).collect();
        v.sort();
        v
    }

    #[test]
    fn identity_corruption_preserves_masks_up_to_order() {
        let clean = disjoint_set();
        let out = corrupt_masks(&clean, &CorruptionConfig::none()).unwrap();
        assert_eq!(sorted(&out), sorted(&clean));
    }

    #[test]
    fn full_drop_empties_the_set() {
        let cfg = CorruptionConfig {
            drop_prob: 1.0,
            ..CorruptionConfig::default()
        };
        assert!(corrupt_masks(&disjoint_set(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn corruption_is_deterministic() {
        let cfg = CorruptionConfig {
            merge_prob: 0.5,
            seed: 42,
            ..CorruptionConfig::default()
        };
        let a = corrupt_masks(&disjoint_set(), &cfg).unwrap();
        let b = corrupt_masks(&disjoint_set(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_produces_two_disjoint_halves() {
        let m = rect(20, 20, 4, 16, 4, 16);
        let (a, b) = split_by_line(&m, 0.3).unwrap();
        assert_eq!(a.area() + b.area(), m.area());
        assert_eq!(a.intersection_area(&b), 0);
    }

    #[test]
    fn merge_joins_touching_pair() {
        let set = MaskSet::from_bitmaps("v", 10, 10, vec![rect(10, 10, 0, 5, 0, 10), rect(10, 10, 5, 10, 0, 10)]).unwrap();
        let cfg = CorruptionConfig {
            merge_prob: 1.0,
            ..CorruptionConfig::none()
        };
        let out = corrupt_masks(&set, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.masks[0].bitmap.area(), 100);
    }

    #[test]
    fn background_of_empty_scene_is_everything() {
        let src = FnSource {
            f: |_| (0.0, [0.0; 3], vec![]),
            slots: 0,
        };
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 8.0, 8, 8).unwrap();
        let bg = background_mask(&cam, &src, &SamplingConfig::default()).unwrap();
        assert!(bg.data.iter().all(|b| *b));
    }

    #[test]
    fn centred_ball_has_no_background_inside_silhouette() {
        let src = FnSource {
            f: |p: Vec3| if p.norm() < 0.5 { (500.0, [1.0; 3], vec![]) } else { (0.0, [0.0; 3], vec![]) },
            slots: 0,
        };
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 16.0, 16, 16).unwrap();
        let bg = background_mask(&cam, &src, &SamplingConfig::default()).unwrap();
        let origin = cam.origin();
        for r in 0..16 {
            for c in 0..16 {
                let d = cam.pixel_direction(r as f64 + 0.5, c as f64 + 0.5);
                // distance from the ray to the centre, with a margin for partial pixels
                let closest = (origin - d * origin.dot(d)).norm();
                if closest < 0.45 {
                    assert!(!bg.get(r, c), "pixel ({r},{c})");
                }
                if closest > 0.55 {
                    assert!(bg.get(r, c));
                }
            }
        }
    }

    #[test]
    fn mask_set_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = disjoint_set();
        set.masks[1].score = Some(MaskScore {
            predicted_iou: 0.75,
            stability: 0.875,
        });
        write_mask_set(dir.path(), &set).unwrap();
        let back = load_mask_set(dir.path(), "view_007", 32, 32).unwrap();
        assert_eq!(back, set);
        let small = load_mask_set(dir.path(), "view_007", 16, 16).unwrap();
        assert_eq!(small.masks[0].bitmap.area(), 25);
    }
}
