//! Single-file checkpoint container.
//!
//! ```text
//! magic    8 bytes  "SEGLIFT\0"
//! version  u32
//! meta     u64 length + JSON
//! count    u32
//! tensors  count x (u32 name length, name, u32 rank, rank x u64 dims, f32 data)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ObjectConfig, ObjectField, RadianceConfig, RadianceField};
use crate::optim::Adam;

use super::{ObjectTrainer, RadianceTrainer, TrainConfig};

const MAGIC: &[u8; 8] = b"SEGLIFT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub radiance: RadianceConfig,
    pub stage1_iteration: usize,
    pub stage1_adam_step: u64,
    #[serde(default)]
    pub objects: Option<ObjectConfig>,
    #[serde(default)]
    pub num_slots: usize,
    #[serde(default)]
    pub stage2_iteration: usize,
    #[serde(default)]
    pub stage2_adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn vector(name: &str, data: Vec<f32>) -> Self {
        Tensor {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Data("checkpoint length overflows".into()))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<Vec<f32>> {
        self.tensor(name)
            .map(|t| t.data.clone())
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let n = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .and_then(|l| l.checked_mul(4))
                .ok_or_else(|| Error::Data("tensor size overflows".into()))?;
            let data = r.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Snapshot of a stage-1 run.
    pub fn from_radiance(t: &RadianceTrainer) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                train: t.config.clone(),
                radiance: t.field.config.clone(),
                stage1_iteration: t.iteration,
                stage1_adam_step: t.adam.step,
                objects: None,
                num_slots: 0,
                stage2_iteration: 0,
                stage2_adam_step: 0,
            },
            tensors: vec![
                Tensor::vector("radiance.params", t.field.params.clone()),
                Tensor::vector("radiance.adam.m", t.adam.m.clone()),
                Tensor::vector("radiance.adam.v", t.adam.v.clone()),
            ],
        }
    }

    /// Adds (or replaces) the stage-2 state.
    pub fn with_objects(mut self, t: &ObjectTrainer) -> Self {
        self.tensors.retain(|x| !x.name.starts_with("objects."));
        self.meta.objects = Some(t.field.config.clone());
        self.meta.num_slots = t.field.num_slots;
        self.meta.stage2_iteration = t.iteration;
        self.meta.stage2_adam_step = t.adam.step;
        self.meta.train = TrainConfig {
            stage2_iters: t.config.stage2_iters,
            ..self.meta.train
        };
        self.tensors.push(Tensor::vector("objects.params", t.field.params.clone()));
        self.tensors.push(Tensor::vector("objects.adam.m", t.adam.m.clone()));
        self.tensors.push(Tensor::vector("objects.adam.v", t.adam.v.clone()));
        self
    }

    pub fn has_objects(&self) -> bool {
        self.meta.objects.is_some()
    }

    pub fn radiance_field(&self) -> Result<RadianceField<f32>> {
        RadianceField::from_params(self.meta.radiance.clone(), self.require("radiance.params")?)
    }

    pub fn radiance_adam(&self) -> Result<Adam<f32>> {
        Ok(Adam {
            config: self.meta.train.adam,
            m: self.require("radiance.adam.m")?,
            v: self.require("radiance.adam.v")?,
            step: self.meta.stage1_adam_step,
        })
    }

    pub fn object_field(&self) -> Result<ObjectField<f32>> {
        let cfg = self
            .meta
            .objects
            .clone()
            .ok_or_else(|| Error::Data("checkpoint has no object field".into()))?;
        ObjectField::from_params(cfg, self.meta.num_slots, self.require("objects.params")?)
    }

    pub fn object_adam(&self) -> Result<Adam<f32>> {
        Ok(Adam {
            config: self.meta.train.adam,
            m: self.require("objects.adam.m")?,
            v: self.require("objects.adam.v")?,
            step: self.meta.stage2_adam_step,
        })
    }
}
