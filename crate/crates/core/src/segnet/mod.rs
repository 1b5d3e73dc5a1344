//! A from-scratch trainable 2D encoder-decoder segmentation network.
//!
//! Two skip topologies share one node graph: `PlainSkip` concatenates each
//! decoder level with its same-level encoder output only, while
//! `NestedDense` fills in the full grid of intermediate nodes, each fed by
//! every earlier same-level node plus the upsampled node from the level
//! below. Each node is Conv3x3 -> ReLU -> Conv3x3 -> ReLU; levels connect
//! through 2x2 max pooling on the way down and 2x nearest upsampling on the
//! way up; a final 1x1 convolution and logistic sigmoid produce per-pixel
//! probabilities.
//!
//! Training is mini-batch Adam on a weighted binary cross-entropy, with a
//! grouped train/validation split and best-validation-Dice model selection.
//! All computation is f64 with fixed reduction orders: the same seed, data
//! and config produce bit-identical parameters regardless of thread count.

mod adam;
mod checkpoint;
mod net;
mod tensor;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use net::{
    bce_with_logits_grad, forward_batch, forward_single, gradients, predict, weighted_bce,
    ModelParams, Network, BCE_CLAMP_EPS,
};
pub use train::{score_by_scan, split_grouped, train, train_with_split, validation_dice, EpochLog};

/// Skip-pathway wiring between encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    PlainSkip,
    NestedDense,
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopologyKind::PlainSkip => write!(f, "plain_skip"),
            TopologyKind::NestedDense => write!(f, "nested_dense"),
        }
    }
}

/// Network shape: resolution levels, base channel width, and how channels
/// grow per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: TopologyKind,
    /// Number of resolution levels L; the input side must be divisible by
    /// 2^(L-1).
    pub depth: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            kind: TopologyKind::NestedDense,
            depth: 3,
            base_channels: 8,
            channel_multiplier: 2,
        }
    }
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::validation("topology depth must be at least 2"));
        }
        if self.base_channels < 1 || self.channel_multiplier < 1 {
            return Err(Error::validation(
                "base channels and multiplier must be at least 1",
            ));
        }
        Ok(())
    }

    /// Channels at resolution level `i`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multiplier.pow(level as u32)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Positive-class weight w in -[w y ln p + (1-w)(1-y) ln(1-p)].
    pub bce_pos_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub topology: Topology,
    pub prediction_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-6,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            bce_pos_weight: 0.8,
            epochs: 50,
            batch_size: 8,
            split_ratio: 0.8,
            seed: 0,
            topology: Topology::default(),
            prediction_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        if !(self.bce_pos_weight > 0.0 && self.bce_pos_weight < 1.0) {
            return Err(Error::validation("bce_pos_weight must be in (0, 1)"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::validation("split_ratio must be in (0, 1)"));
        }
        if self.epochs < 1 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Deterministic seed chain: every stochastic step derives its own stream
/// from a base seed, a purpose tag, and an index, through FNV-1a plus a
/// splitmix finalizer.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for &b in base
        .to_le_bytes()
        .iter()
        .chain(tag.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // splitmix64 finalizer
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            bce_pos_weight: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.topology.depth = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn derive_seed_spreads_and_repeats() {
        let a = derive_seed(7, "init", 0);
        assert_eq!(a, derive_seed(7, "init", 0));
        assert_ne!(a, derive_seed(7, "init", 1));
        assert_ne!(a, derive_seed(7, "shuffle", 0));
        assert_ne!(a, derive_seed(8, "init", 0));
    }
}
