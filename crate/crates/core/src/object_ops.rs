//! Object-level editing of a trained model: slot selection, recolouring and composing
//! several (possibly transformed) models into one scene.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, Vec3};
use crate::image::{ProbabilityImage, RgbImage};
use crate::render::{render_image, SamplingConfig, Shading, VolumeSource};

/// How slot membership gates density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// Keep a point when its most probable slot is selected.
    #[default]
    Hard,
    /// Scale density by the summed probability of the selected slots.
    Soft,
}

/// A set of slot ids (1-based, matching segmentation labels).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSelector {
    pub ids: Vec<u32>,
    pub membership: Membership,
}

impl SlotSelector {
    pub fn new(ids: impl IntoIterator<Item = u32>) -> Self {
        let mut ids: Vec<u32> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        SlotSelector {
            ids,
            membership: Membership::Hard,
        }
    }

    pub fn all(num_slots: usize) -> Self {
        Self::new(1..=num_slots as u32)
    }

    pub fn soft(mut self) -> Self {
        self.membership = Membership::Soft;
        self
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub fn complement(&self, num_slots: usize) -> Self {
        SlotSelector {
            ids: (1..=num_slots as u32).filter(|i| !self.contains(*i)).collect(),
            membership: self.membership,
        }
    }

    pub fn validate(&self, num_slots: usize) -> Result<()> {
        match self.ids.iter().find(|i| **i == 0 || **i as usize > num_slots) {
            Some(i) => Err(Error::InvalidInput(format!("slot id {i} outside 1..={num_slots}"))),
            None => Ok(()),
        }
    }

    /// Gate in `[0, 1]` for one point's slot probabilities.
    pub fn gate(&self, probs: &[f64]) -> f64 {
        match self.membership {
            Membership::Hard => {
                if probs.is_empty() {
                    return 0.0;
                }
                let mut best = 0;
                for (n, p) in probs.iter().enumerate().skip(1) {
                    if *p > probs[best] {
                        best = n;
                    }
                }
                if self.contains(best as u32 + 1) {
                    1.0
                } else {
                    0.0
                }
            }
            Membership::Soft => self.ids.iter().filter_map(|i| probs.get(*i as usize - 1)).sum(),
        }
    }
}

/// `c' = clamp(A c + b, 0, 1)`, one affine map per output channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorMap {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl Default for ColorMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl ColorMap {
    pub fn identity() -> Self {
        ColorMap {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
        }
    }

    pub fn zero() -> Self {
        ColorMap {
            matrix: [[0.0; 3]; 3],
            offset: [0.0; 3],
        }
    }

    /// Output channel `c` takes input channel `perm[c]`.
    pub fn permutation(perm: [usize; 3]) -> Self {
        let mut matrix = [[0.0; 3]; 3];
        for (c, src) in perm.iter().enumerate() {
            matrix[c][*src] = 1.0;
        }
        ColorMap { matrix, offset: [0.0; 3] }
    }

    pub fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| {
            let row = self.matrix[k];
            (row[0] * c[0] + row[1] * c[1] + row[2] * c[2] + self.offset[k]).clamp(0.0, 1.0)
        })
    }
}

/// A source with density gated by a selector and colour remapped inside another.
pub struct EditedSource<'a> {
    pub inner: &'a dyn VolumeSource,
    pub selector: Option<SlotSelector>,
    pub recolor: Option<(SlotSelector, ColorMap)>,
}

impl<'a> EditedSource<'a> {
    pub fn new(inner: &'a dyn VolumeSource) -> Self {
        EditedSource {
            inner,
            selector: None,
            recolor: None,
        }
    }

    pub fn select(mut self, sel: SlotSelector) -> Self {
        self.selector = Some(sel);
        self
    }

    pub fn recolor(mut self, sel: SlotSelector, map: ColorMap) -> Self {
        self.recolor = Some((sel, map));
        self
    }

    fn needs_slots(&self) -> Result<()> {
        let n = self.inner.num_slots();
        if (self.selector.is_some() || self.recolor.is_some()) && n == 0 {
            return Err(Error::InvalidInput("selection needs an object field".into()));
        }
        if let Some(s) = &self.selector {
            s.validate(n)?;
        }
        if let Some((s, _)) = &self.recolor {
            s.validate(n)?;
        }
        Ok(())
    }
}

impl VolumeSource for EditedSource<'_> {
    fn num_slots(&self) -> usize {
        self.inner.num_slots()
    }

    fn density(&self, points: &[Vec3]) -> Vec<f64> {
        if self.selector.is_none() {
            return self.inner.density(points);
        }
        let dirs = vec![Vec3::new(0.0, 0.0, 1.0); points.len()];
        self.shade(points, &dirs).sigma
    }

    fn shade(&self, points: &[Vec3], dirs: &[Vec3]) -> Shading {
        let mut s = self.inner.shade(points, dirs);
        let n = self.inner.num_slots();
        for i in 0..s.sigma.len() {
            let probs = &s.probs[i * n..(i + 1) * n];
            if let Some(sel) = &self.selector {
                s.sigma[i] *= sel.gate(probs);
            }
            if let Some((sel, map)) = &self.recolor {
                let g = sel.gate(probs);
                if g > 0.0 {
                    let mapped = map.apply(s.color[i]);
                    s.color[i] = std::array::from_fn(|c| g * mapped[c] + (1.0 - g) * s.color[i][c]);
                }
            }
        }
        s
    }
}

/// Renders only the selected slots.
pub fn render_selected(camera: &Camera, source: &dyn VolumeSource, sel: &SlotSelector, cfg: &SamplingConfig) -> Result<(RgbImage, ProbabilityImage)> {
    let edited = EditedSource::new(source).select(sel.clone());
    edited.needs_slots()?;
    render_image(camera, &edited, &cfg.deterministic(), 0)
}

/// Renders with `map` applied to the colour of selected slots.
pub fn recolor(camera: &Camera, source: &dyn VolumeSource, sel: &SlotSelector, map: &ColorMap, cfg: &SamplingConfig) -> Result<RgbImage> {
    let edited = EditedSource::new(source).recolor(sel.clone(), *map);
    edited.needs_slots()?;
    Ok(render_image(camera, &edited, &cfg.deterministic(), 0)?.0)
}

/// Maps instance-local points to the scene: `x_world = scale * R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity {
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
            scale: 1.0,
        }
    }
}

impl Similarity {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidInput(format!("instance scale must be positive, got {}", self.scale)));
        }
        if !self.rotation.is_rotation(1e-6) {
            return Err(Error::InvalidInput("instance rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn to_local(&self, x: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(x - self.translation) * (1.0 / self.scale)
    }

    pub fn dir_to_local(&self, d: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(d)
    }
}

/// One placed model in a composition.
pub struct SceneInstance<'a> {
    pub source: EditedSource<'a>,
    pub transform: Similarity,
}

/// Several instances rendered jointly: densities add, colours mix by density.
pub struct Composition<'a> {
    pub instances: Vec<SceneInstance<'a>>,
}

impl Composition<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::InvalidInput("composition has no instances".into()));
        }
        for i in &self.instances {
            i.transform.validate()?;
            i.source.needs_slots()?;
        }
        Ok(())
    }
}

impl VolumeSource for Composition<'_> {
    fn num_slots(&self) -> usize {
        0
    }

    fn density(&self, points: &[Vec3]) -> Vec<f64> {
        let mut out = vec![0.0; points.len()];
        for inst in &self.instances {
            let local: Vec<Vec3> = points.iter().map(|p| inst.transform.to_local(*p)).collect();
            for (o, s) in out.iter_mut().zip(inst.source.density(&local)) {
                *o += s / inst.transform.scale;
            }
        }
        out
    }

    fn shade(&self, points: &[Vec3], dirs: &[Vec3]) -> Shading {
        let n = points.len();
        let mut sigma = vec![0.0; n];
        let mut weighted = vec![[0.0; 3]; n];
        for inst in &self.instances {
            let local: Vec<Vec3> = points.iter().map(|p| inst.transform.to_local(*p)).collect();
            let ldirs: Vec<Vec3> = dirs.iter().map(|d| inst.transform.dir_to_local(*d)).collect();
            let s = inst.source.shade(&local, &ldirs);
            for i in 0..n {
                let sg = s.sigma[i] / inst.transform.scale;
                sigma[i] += sg;
                for c in 0..3 {
                    weighted[i][c] += sg * s.color[i][c];
                }
            }
        }
        let color = sigma
            .iter()
            .zip(&weighted)
            .map(|(s, w)| if *s > 0.0 { w.map(|v| v / s) } else { [0.0; 3] })
            .collect();
        Shading {
            sigma,
            color,
            probs: Vec::new(),
        }
    }
}

pub fn compose(composition: &Composition<'_>, camera: &Camera, cfg: &SamplingConfig) -> Result<RgbImage> {
    composition.validate()?;
    Ok(render_image(camera, composition, &cfg.deterministic(), 0)?.0)
}

/// One `[[instance]]` entry of a scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    /// Checkpoint path, relative to the scene file.
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "default_axis")]
    pub rotation_axis: [f64; 3],
    /// Radians.
    #[serde(default)]
    pub rotation_angle: f64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Selected slot ids; all slots when absent.
    #[serde(default)]
    pub slots: Option<Vec<u32>>,
    #[serde(default)]
    pub membership: Membership,
    #[serde(default)]
    pub color_map: Option<ColorMap>,
}

fn default_axis() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

fn one() -> f64 {
    1.0
}

impl InstanceSpec {
    pub fn transform(&self) -> Similarity {
        Similarity {
            rotation: Mat3::from_axis_angle(Vec3(self.rotation_axis), self.rotation_angle),
            translation: Vec3(self.translation),
            scale: self.scale,
        }
    }

    pub fn selector(&self, num_slots: usize) -> SlotSelector {
        let mut s = match &self.slots {
            Some(ids) => SlotSelector::new(ids.iter().copied()),
            None => SlotSelector::all(num_slots),
        };
        s.membership = self.membership;
        s
    }
}

/// A composition file: a list of `[[instance]]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(rename = "instance", default)]
    pub instances: Vec<InstanceSpec>,
}

impl SceneFile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: SceneFile = toml::from_str(text).map_err(|e| Error::Config(format!("scene file: {e}")))?;
        if f.instances.is_empty() {
            return Err(Error::Config("scene file lists no instances".into()));
        }
        Ok(f)
    }

    /// Reads `path`, resolving checkpoint paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut f = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for i in &mut f.instances {
            if i.checkpoint.is_relative() {
                i.checkpoint = base.join(&i.checkpoint);
            }
        }
        Ok(f)
    }
}
