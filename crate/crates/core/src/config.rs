//! Run configuration: one nested TOML document covering every stage.
//!
//! A file may name a `preset` (`published` or `desk`); its tables are merged over that preset,
//! so only overridden keys need to appear. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricOptions;
use crate::fields::{ObjectConfig, RadianceConfig};
use crate::geometry::RayBounds;
use crate::hash_grid::{auto_dense_threshold, HashGridConfig};
use crate::losses::LossWeights;
use crate::masks::{CorruptionConfig, PostprocessConfig};
use crate::render::SamplingConfig;
use crate::synthetic::RigConfig;
use crate::train::{CoarseToFine, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Published hyper-parameters.
    #[default]
    Published,
    /// Scaled down for a single CPU and 64x64 scenes.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "published" => Ok(Preset::Published),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected published or desk)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub radiance: RadianceConfig,
    pub objects: ObjectConfig,
    pub loss: LossWeights,
    pub postprocess: PostprocessConfig,
    pub corruption: CorruptionConfig,
    pub rig: RigConfig,
    pub eval: MetricOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::published()
    }
}

fn grid(levels: usize, finest: f64, table_log2: u32) -> HashGridConfig {
    let table_size = 1 << table_log2;
    HashGridConfig {
        num_levels: levels,
        features_per_level: 2,
        base_resolution: 16,
        per_level_scale: (finest / 16.0).powf(1.0 / (levels - 1) as f64),
        table_size,
        dense_threshold: auto_dense_threshold(table_size),
    }
}

impl RunConfig {
    pub fn published() -> Self {
        RunConfig {
            preset: Preset::Published,
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            radiance: RadianceConfig::default(),
            objects: ObjectConfig::default(),
            loss: LossWeights::default(),
            postprocess: PostprocessConfig::default(),
            corruption: CorruptionConfig::default(),
            rig: RigConfig::default(),
            eval: MetricOptions::default(),
            paths: Paths::default(),
        }
    }

    pub fn desk() -> Self {
        let published = Self::published();
        RunConfig {
            preset: Preset::Desk,
            train: TrainConfig {
                stage1_iters: 1500,
                stage1_rays_per_batch: 1024,
                stage1_lr_decay: 0.0015,
                coarse2fine: CoarseToFine { start_levels: 4, every: 50 },
                empty_space_points: 1024,
                stage2_iters: 400,
                tv_pairs_per_level: 1024,
                ..published.train
            },
            sampling: SamplingConfig {
                coarse_samples: 32,
                fine_samples: 32,
                bounds: RayBounds { radius: 1.3, ..published.sampling.bounds },
                ..published.sampling
            },
            radiance: RadianceConfig {
                grid: grid(8, 256.0, 16),
                density_hidden: vec![64],
                color_hidden: vec![32],
                ..published.radiance
            },
            objects: ObjectConfig {
                grid: grid(6, 128.0, 15),
                hidden: vec![32],
                ..published.objects
            },
            postprocess: PostprocessConfig {
                min_area_frac: 0.002,
                dilate_px: 1,
                ..published.postprocess
            },
            loss: LossWeights {
                lambda_empty: 1e-2,
                ..published.loss
            },
            ..published
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Published => Self::published(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Parses a config document, merging it over the preset it names (default `published`).
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_base(text, None)
    }

    /// Like [`Self::from_toml`]; `base` applies when the document names no preset.
    pub fn from_toml_with_base(text: &str, base: Option<Preset>) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let preset = match doc.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => base.unwrap_or_default(),
        };
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(format!("{e}")))?;
        let merged = merge(base, doc);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_base(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampling.validate()?;
        self.loss.validate()?;
        self.corruption.validate()?;
        if self.postprocess.min_area_frac < 0.0 || !(0.0..=1.0).contains(&self.postprocess.min_score) {
            return Err(Error::Config("invalid postprocess settings".into()));
        }
        for g in [&self.radiance.grid, &self.objects.grid] {
            crate::hash_grid::HashGrid::new(g.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults() {
        let c = RunConfig::published();
        assert_eq!((c.loss.lambda_fp, c.loss.lambda_tv, c.loss.lambda_empty), (0.01, 0.01, 1e-4));
        assert_eq!(c.train.stage1_iters, 10_000);
        assert_eq!(c.radiance.grid.num_levels, 16);
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        for c in [RunConfig::published(), RunConfig::desk()] {
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn partial_document_overrides_preset() {
        let c = RunConfig::from_toml("preset = \"desk\"\n[train]\nstage2_iters = 7\n[loss]\nlambda_tv = 0.0\n").unwrap();
        assert_eq!(c.train.stage2_iters, 7);
        assert_eq!(c.train.stage1_iters, RunConfig::desk().train.stage1_iters);
        assert_eq!(c.loss.lambda_tv, 0.0);
        assert_eq!(c.loss.lambda_fp, 0.01);
        let empty = RunConfig::from_toml("").unwrap();
        assert_eq!(empty, RunConfig::published());
        let based = RunConfig::from_toml_with_base("", Some(Preset::Desk)).unwrap();
        assert_eq!(based, RunConfig::desk());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["bogus = 1", "[train]\nstage9 = 3", "[radiance.grid]\nlevels = 3", "preset = \"huge\""] {
            assert!(matches!(RunConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = RunConfig::from_toml("[train]\nstage2_batch_views = 0\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(RunConfig::from_toml("[loss]\nlambda_fp = -1.0\n").is_err());
    }
}
