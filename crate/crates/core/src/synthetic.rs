//! Analytic multi-object scenes with known density, colour and instance ids, an exact
//! ray-intersection renderer, and dataset emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{write_clean_masks, Frame, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{generate_ray, Camera, Mat3, Ray, RayBounds, Vec3};
use crate::image::{LabelImage, RgbImage};
use crate::masks::{corrupt_masks, CorruptionConfig, MaskSet};
use crate::render::{Shading, VolumeSource};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Cuboid { half_extents: [f64; 3] },
    /// Cylinder along the local y axis.
    Disk { radius: f64, half_thickness: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    /// Local-to-world rotation.
    pub rotation: Mat3,
    pub albedo: [f64; 3],
    pub instance_id: u32,
}

impl Primitive {
    fn to_local(&self, x: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(x - self.center)
    }

    pub fn contains(&self, x: Vec3) -> bool {
        let p = self.to_local(x);
        match self.shape {
            Shape::Sphere { radius } => p.norm_sq() <= radius * radius,
            Shape::Cuboid { half_extents: h } => (0..3).all(|i| p[i].abs() <= h[i]),
            Shape::Disk { radius, half_thickness } => p.y().abs() <= half_thickness && p.x() * p.x() + p.z() * p.z() <= radius * radius,
        }
    }

    /// Entry and exit parameters of the ray's line through the primitive.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let rt = self.rotation.transpose();
        let o = rt.mul_vec(origin - self.center);
        let d = rt.mul_vec(dir);
        match self.shape {
            Shape::Sphere { radius } => {
                let b = o.dot(d);
                let c = o.norm_sq() - radius * radius;
                let disc = b * b - c;
                (disc >= 0.0).then(|| (-b - disc.sqrt(), -b + disc.sqrt()))
            }
            Shape::Cuboid { half_extents: h } => slab(o, d, h),
            Shape::Disk { radius, half_thickness } => {
                let (mut t0, mut t1) = if d.y().abs() < 1e-15 {
                    if o.y().abs() > half_thickness {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let a = (-half_thickness - o.y()) / d.y();
                    let b = (half_thickness - o.y()) / d.y();
                    (a.min(b), a.max(b))
                };
                let qa = d.x() * d.x() + d.z() * d.z();
                let qb = o.x() * d.x() + o.z() * d.z();
                let qc = o.x() * o.x() + o.z() * o.z() - radius * radius;
                if qa < 1e-15 {
                    if qc > 0.0 {
                        return None;
                    }
                } else {
                    let disc = qb * qb - qa * qc;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    t0 = t0.max((-qb - s) / qa);
                    t1 = t1.min((-qb + s) / qa);
                }
                (t0 <= t1).then_some((t0, t1))
            }
        }
    }
}

fn slab(o: Vec3, d: Vec3, h: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > h[i] {
                return None;
            }
            continue;
        }
        let a = (-h[i] - o[i]) / d[i];
        let b = (h[i] - o[i]) / d[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some((t0, t1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub sigma_solid: f64,
}

/// Result of sampling the scene at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub instance: Option<u32>,
}

/// Result of the exact renderer for one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub color: [f64; 3],
    pub instance: u32,
}

impl AnalyticScene {
    /// Three spheres and a rotated box resting on a ground disk, black background.
    pub fn default_scene() -> Self {
        let ground = -0.3;
        let gap = 0.005;
        let sphere = |x: f64, z: f64, r: f64, albedo: [f64; 3], id: u32| Primitive {
            shape: Shape::Sphere { radius: r },
            center: Vec3::new(x, ground + r + gap, z),
            rotation: Mat3::IDENTITY,
            albedo,
            instance_id: id,
        };
        AnalyticScene {
            primitives: vec![
                Primitive {
                    shape: Shape::Disk {
                        radius: 0.85,
                        half_thickness: 0.03,
                    },
                    center: Vec3::new(0.0, ground - 0.03, 0.0),
                    rotation: Mat3::IDENTITY,
                    albedo: [0.55, 0.55, 0.55],
                    instance_id: 1,
                },
                sphere(-0.4, 0.15, 0.2, [0.85, 0.2, 0.15], 2),
                sphere(0.35, 0.3, 0.15, [0.2, 0.75, 0.3], 3),
                sphere(0.05, -0.45, 0.12, [0.2, 0.35, 0.9], 4),
                Primitive {
                    shape: Shape::Cuboid {
                        half_extents: [0.14, 0.14, 0.14],
                    },
                    center: Vec3::new(0.3, ground + 0.14 + gap, -0.15),
                    rotation: Mat3::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.5),
                    albedo: [0.9, 0.8, 0.2],
                    instance_id: 5,
                },
            ],
            background: [0.0; 3],
            sigma_solid: 500.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.primitives.iter().map(|p| p.instance_id).collect();
        ids.sort();
        let n = ids.len();
        ids.dedup();
        if ids.len() != n || ids.first() == Some(&0) {
            return Err(Error::InvalidInput("instance ids must be unique and at least 1".into()));
        }
        Ok(())
    }

    pub fn max_instance(&self) -> u32 {
        self.primitives.iter().map(|p| p.instance_id).max().unwrap_or(0)
    }

    /// Density, colour and instance at `x`; overlaps resolve to the first primitive.
    pub fn sample(&self, x: Vec3) -> SceneSample {
        match self.primitives.iter().find(|p| p.contains(x)) {
            Some(p) => SceneSample {
                sigma: self.sigma_solid,
                color: p.albedo,
                instance: Some(p.instance_id),
            },
            None => SceneSample {
                sigma: 0.0,
                color: self.background,
                instance: None,
            },
        }
    }

    /// First surface along the ray within `[t_near, t_far]`.
    pub fn trace(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for p in &self.primitives {
            if let Some((t0, t1)) = p.intersect(ray.origin, ray.direction) {
                let t = t0.max(ray.t_near);
                if t <= t1 && t <= ray.t_far && best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        color: p.albedo,
                        instance: p.instance_id,
                    });
                }
            }
        }
        best
    }

    /// Exact colour image and label map for a camera.
    pub fn render_exact(&self, camera: &Camera) -> Result<(RgbImage, LabelImage)> {
        let mut rgb = RgbImage::new(camera.width, camera.height);
        let mut labels = LabelImage::new(camera.width, camera.height);
        let bounds = RayBounds::default();
        for r in 0..camera.height {
            for c in 0..camera.width {
                let ray = generate_ray(camera, r, c, &bounds)?;
                let (color, id) = match self.trace(&ray) {
                    Some(h) => (h.color, h.instance),
                    None => (self.background, 0),
                };
                rgb.set_pixel(r, c, color.map(|v| v as f32));
                labels.data[r * camera.width + c] = id;
            }
        }
        Ok((rgb, labels))
    }
}

/// One slot per instance id (slot 0 unused, background).
impl VolumeSource for AnalyticScene {
    fn num_slots(&self) -> usize {
        self.max_instance() as usize + 1
    }

    fn density(&self, points: &[Vec3]) -> Vec<f64> {
        points.iter().map(|p| self.sample(*p).sigma).collect()
    }

    fn shade(&self, points: &[Vec3], _dirs: &[Vec3]) -> Shading {
        let n = self.num_slots();
        let mut out = Shading {
            sigma: Vec::with_capacity(points.len()),
            color: Vec::with_capacity(points.len()),
            probs: vec![0.0; points.len() * n],
        };
        for (i, p) in points.iter().enumerate() {
            let s = self.sample(*p);
            out.sigma.push(s.sigma);
            out.color.push(s.color);
            out.probs[i * n + s.instance.unwrap_or(0) as usize] = 1.0;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub train_views: usize,
    pub test_views: usize,
    pub resolution: usize,
    pub radius: f64,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            train_views: 30,
            test_views: 5,
            resolution: 64,
            radius: 2.6,
            fov_deg: 47.0,
            min_elevation_deg: 15.0,
            max_elevation_deg: 60.0,
        }
    }
}

impl RigConfig {
    pub fn focal(&self) -> f64 {
        0.5 * self.resolution as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    /// Cameras on the upper hemisphere looking at the origin. Azimuths follow the golden
    /// angle and elevations sweep the allowed band, so test views interleave with training
    /// views without coinciding.
    pub fn cameras(&self) -> Result<Vec<(String, Camera, Split)>> {
        let total = self.train_views + self.test_views;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let held_out: Vec<usize> = (0..self.test_views)
            .map(|j| ((j as f64 + 0.5) * total as f64 / self.test_views as f64) as usize)
            .collect();
        let mut out = Vec::with_capacity(total);
        for i in 0..total {
            let frac = (i as f64 + 0.5) / total as f64;
            let el = (self.min_elevation_deg + frac * (self.max_elevation_deg - self.min_elevation_deg)).to_radians();
            let az = golden * i as f64;
            let eye = Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * self.radius;
            let cam = Camera::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), self.focal(), self.resolution, self.resolution)?;
            let (prefix, split) = if held_out.contains(&i) {
                ("test", Split::Test)
            } else {
                ("train", Split::Train)
            };
            out.push((format!("{prefix}_{i:03}"), cam, split));
        }
        Ok(out)
    }
}

/// Renders the scene from a camera rig into a dataset: images, corrupted training masks,
/// clean masks and label maps. Deterministic given the corruption seed.
pub fn build_dataset(scene: &AnalyticScene, rig: &RigConfig, corruption: &CorruptionConfig) -> Result<SceneDataset> {
    scene.validate()?;
    corruption.validate()?;
    if rig.train_views + rig.test_views < 2 {
        return Err(Error::InvalidInput("need at least 2 views".into()));
    }
    let mut frames = Vec::new();
    let mut masks = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for (view_id, camera, split) in rig.cameras()? {
        let (image, label) = scene.render_exact(&camera)?;
        if split == Split::Train {
            let clean = clean_mask_set(&view_id, &label)?;
            masks.insert(view_id.clone(), corrupt_masks(&clean, corruption)?);
        }
        labels.insert(view_id.clone(), label);
        frames.push(Frame {
            view_id,
            camera,
            image,
            split,
        });
    }
    Ok(SceneDataset {
        width: rig.resolution,
        height: rig.resolution,
        background: scene.background,
        frames,
        masks,
        labels,
    })
}

/// Instance masks of a label map, in increasing id order (background excluded).
pub fn clean_mask_set(view_id: &str, labels: &LabelImage) -> Result<MaskSet> {
    let bitmaps = labels
        .labels()
        .into_iter()
        .filter(|id| *id != 0)
        .map(|id| labels.mask_of(id))
        .collect();
    MaskSet::from_bitmaps(view_id, labels.width, labels.height, bitmaps)
}

/// [`build_dataset`] followed by writing the dataset layout, clean masks included.
pub fn emit_dataset(scene: &AnalyticScene, rig: &RigConfig, corruption: &CorruptionConfig, out_dir: &Path) -> Result<SceneDataset> {
    let ds = build_dataset(scene, rig, corruption)?;
    ds.save(out_dir)?;
    for (view, labels) in &ds.labels {
        write_clean_masks(out_dir, view, labels)?;
    }
    let scene_path = out_dir.join("scene.json");
    let text = serde_json::to_string_pretty(scene).expect("scene serialises");
    std::fs::write(&scene_path, text).map_err(|e| Error::io(&scene_path, e))?;
    Ok(ds)
}
