//! Two-stage optimisation. Stage 1 fits the radiance field to random rays; stage 2 freezes
//! it and fits the object field to whole-view mask sets.
//!
//! Every iteration draws its randomness from `(seed, stage, iteration)` and reduces
//! gradients in a fixed order, so a run is a pure function of its configuration and
//! resuming from a checkpoint continues the same trajectory.

mod checkpoint;
mod objects;
mod radiance;

pub use checkpoint::{Checkpoint, CheckpointMeta, Tensor, CHECKPOINT_VERSION};
pub use objects::{build_view_cache, object_view_loss, ObjectTrainer, ViewCache, ViewLoss};
pub use radiance::{held_out_psnr, rgb_objective, training_rays, RadianceTrainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PixelNorm;
use crate::optim::AdamConfig;

pub(crate) const STAGE_RADIANCE: u64 = 1;
pub(crate) const STAGE_OBJECTS: u64 = 2;

/// Progressive activation of hash-grid levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseToFine {
    pub start_levels: usize,
    /// Iterations between activating one more level; 0 activates everything at once.
    pub every: usize,
}

impl Default for CoarseToFine {
    fn default() -> Self {
        CoarseToFine { start_levels: 4, every: 50 }
    }
}

impl CoarseToFine {
    pub fn active_levels(&self, iteration: usize, total: usize) -> usize {
        if self.every == 0 {
            return total;
        }
        (self.start_levels + iteration / self.every).clamp(1, total)
    }
}

/// How masks are assigned to slots in stage 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Optimal injective assignment.
    #[default]
    Hungarian,
    /// Each mask independently takes its highest-affinity slot (no-matching ablation).
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_iters: usize,
    pub stage1_rays_per_batch: usize,
    pub lr_stage1: f64,
    /// Per-iteration multiplicative decay of the stage-1 rate; 0 keeps it constant.
    pub stage1_lr_decay: f64,
    pub coarse2fine: CoarseToFine,
    /// Uniform points per iteration for the empty-space penalty.
    pub empty_space_points: usize,
    pub stage2_iters: usize,
    pub stage2_batch_views: usize,
    pub lr_stage2: f64,
    pub warmup_iters: usize,
    pub lr_decay: f64,
    pub matching: MatchingMode,
    pub pixel_norm: PixelNorm,
    /// Stage-2 samples whose compositing weight falls below this are dropped from the cache.
    pub cache_weight_threshold: f64,
    pub tv_pairs_per_level: usize,
    /// Rays (stage 1) per parallel work item.
    pub chunk_rays: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            stage1_iters: 10_000,
            stage1_rays_per_batch: 4096,
            lr_stage1: 1e-2,
            stage1_lr_decay: 0.0,
            coarse2fine: CoarseToFine::default(),
            empty_space_points: 1024,
            stage2_iters: 2000,
            stage2_batch_views: 5,
            lr_stage2: 0.15,
            warmup_iters: 20,
            lr_decay: 0.005,
            matching: MatchingMode::Hungarian,
            pixel_norm: PixelNorm::Mean,
            cache_weight_threshold: 1e-3,
            tv_pairs_per_level: 4096,
            chunk_rays: 256,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("stage1_iters", self.stage1_iters),
            ("stage1_rays_per_batch", self.stage1_rays_per_batch),
            ("stage2_iters", self.stage2_iters),
            ("stage2_batch_views", self.stage2_batch_views),
            ("chunk_rays", self.chunk_rays),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lr_decay", self.lr_decay), ("stage1_lr_decay", self.stage1_lr_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.cache_weight_threshold) {
            return Err(Error::Config("cache_weight_threshold must be in [0, 1)".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps < 0.0 || a.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Slot count for the object field: twice the largest per-view mask count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotBudget {
    pub k_max: usize,
    pub num_slots: usize,
}

impl SlotBudget {
    pub fn from_counts(counts: impl IntoIterator<Item = usize>) -> Self {
        let k_max = counts.into_iter().max().unwrap_or(0);
        SlotBudget {
            k_max,
            num_slots: (2 * k_max).max(2),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::SceneDataset;
    use crate::masks::CorruptionConfig;
    use crate::render::SamplingConfig;
    use crate::synthetic::{build_dataset, AnalyticScene, RigConfig};
    use proptest::prelude::*;

    pub(crate) fn tiny_dataset() -> SceneDataset {
        let rig = RigConfig {
            train_views: 4,
            test_views: 1,
            resolution: 10,
            ..RigConfig::default()
        };
        let corruption = CorruptionConfig { seed: 3, ..CorruptionConfig::default() };
        build_dataset(&AnalyticScene::default_scene(), &rig, &corruption).unwrap()
    }

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            seed: 11,
            stage1_iters: 4,
            stage1_rays_per_batch: 48,
            coarse2fine: CoarseToFine { start_levels: 1, every: 2 },
            empty_space_points: 16,
            stage2_iters: 4,
            stage2_batch_views: 2,
            tv_pairs_per_level: 32,
            chunk_rays: 16,
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_sampling() -> SamplingConfig {
        SamplingConfig {
            coarse_samples: 6,
            fine_samples: 6,
            ..SamplingConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.stage1_iters, c.stage2_iters, c.stage2_batch_views), (10_000, 2000, 5));
        assert_eq!((c.lr_stage2, c.warmup_iters, c.lr_decay), (0.15, 20, 0.005));
        assert_eq!(c.coarse2fine, CoarseToFine { start_levels: 4, every: 50 });
        c.validate().unwrap();
    }

    #[test]
    fn coarse_to_fine_schedule() {
        let c = CoarseToFine::default();
        assert_eq!(c.active_levels(0, 16), 4);
        assert_eq!(c.active_levels(49, 16), 4);
        assert_eq!(c.active_levels(50, 16), 5);
        assert_eq!(c.active_levels(600, 16), 16);
        assert_eq!(c.active_levels(10_000, 16), 16);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = TrainConfig { stage2_batch_views: 0, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.stage2_batch_views = 5;
        c.lr_stage2 = -1.0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn budget_covers_every_view(counts in prop::collection::vec(0usize..40, 1..20)) {
            let b = SlotBudget::from_counts(counts.iter().copied());
            prop_assert_eq!(b.k_max, *counts.iter().max().unwrap());
            for k in counts {
                prop_assert!(k <= b.num_slots);
            }
        }
    }
}
