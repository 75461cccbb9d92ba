//! On-disk scene datasets.
//!
//! ```text
//! <root>/cameras.json          width, height, background, frames[]
//! <root>/images/<view>.png     8-bit RGB
//! <root>/masks/<view>/<k>.png  supervision masks (+ optional meta.json)
//! <root>/clean/<view>/<id>.png ground-truth instance masks (synthetic scenes)
//! <root>/labels/<view>.png     16-bit instance label map (synthetic scenes)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::{read_label_png, read_rgb_png, write_label_png, write_rgb_png, LabelImage, RgbImage};
use crate::masks::{load_mask_set, write_mask_set, MaskSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    view_id: String,
    camera_to_world: [[f64; 4]; 4],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    image: String,
    split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CamerasFile {
    width: usize,
    height: usize,
    #[serde(default)]
    background: [f64; 3],
    frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub view_id: String,
    pub camera: Camera,
    pub image: RgbImage,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub frames: Vec<Frame>,
    /// Supervision masks per view.
    pub masks: BTreeMap<String, MaskSet>,
    /// Ground-truth label maps per view, when known.
    pub labels: BTreeMap<String, LabelImage>,
}

impl SceneDataset {
    pub fn train_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.split == Split::Train)
    }

    pub fn test_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.split == Split::Test)
    }

    pub fn frame(&self, view_id: &str) -> Option<&Frame> {
        self.frames.iter().find(|f| f.view_id == view_id)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let cam_path = root.join("cameras.json");
        let text = std::fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
        let file: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", cam_path.display())))?;
        let mut frames = Vec::with_capacity(file.frames.len());
        let mut masks = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for rec in file.frames {
            let camera = Camera::new(rec.camera_to_world, rec.fx, rec.fy, (rec.cx, rec.cy), file.width, file.height)
                .map_err(|e| Error::Data(format!("view {}: {e}", rec.view_id)))?;
            let image = read_rgb_png(&root.join(&rec.image))?;
            if image.width != file.width || image.height != file.height {
                return Err(Error::Data(format!("view {}: image size differs from cameras.json", rec.view_id)));
            }
            let mask_dir = root.join("masks").join(&rec.view_id);
            if mask_dir.is_dir() {
                masks.insert(rec.view_id.clone(), load_mask_set(&mask_dir, &rec.view_id, file.width, file.height)?);
            }
            let label_path = root.join("labels").join(format!("{}.png", rec.view_id));
            if label_path.exists() {
                labels.insert(rec.view_id.clone(), read_label_png(&label_path)?);
            }
            frames.push(Frame {
                view_id: rec.view_id,
                camera,
                image,
                split: rec.split,
            });
        }
        if frames.is_empty() {
            return Err(Error::Data(format!("{}: no frames", cam_path.display())));
        }
        Ok(SceneDataset {
            width: file.width,
            height: file.height,
            background: file.background,
            frames,
            masks,
            labels,
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut records = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let rel = format!("images/{}.png", f.view_id);
            write_rgb_png(&root.join(&rel), &f.image)?;
            let c = &f.camera;
            records.push(FrameRecord {
                view_id: f.view_id.clone(),
                camera_to_world: c.camera_to_world,
                fx: c.focal_x,
                fy: c.focal_y,
                cx: c.principal_point.0,
                cy: c.principal_point.1,
                image: rel,
                split: f.split,
            });
        }
        let file = CamerasFile {
            width: self.width,
            height: self.height,
            background: self.background,
            frames: records,
        };
        let path = root.join("cameras.json");
        let text = serde_json::to_string_pretty(&file).expect("cameras serialise");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for (view, set) in &self.masks {
            write_mask_set(&root.join("masks").join(view), set)?;
        }
        for (view, labels) in &self.labels {
            write_label_png(&root.join("labels").join(format!("{view}.png")), labels)?;
        }
        Ok(())
    }
}

/// Writes `clean/<view>/<id>.png` for every nonzero label of `labels`.
pub fn write_clean_masks(root: &Path, view_id: &str, labels: &LabelImage) -> Result<()> {
    let dir: PathBuf = root.join("clean").join(view_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for id in labels.labels().into_iter().filter(|id| *id != 0) {
        crate::image::write_mask_png(&dir.join(format!("{id}.png")), &labels.mask_of(id))?;
    }
    Ok(())
}
