//! Cross-dataset benchmarking harness for white-matter lesion segmentation.
//!
//! The pipeline: load FLAIR volumes and binary lesion masks ([`volume`]),
//! harmonize intensities across scanners by quantile normalization
//! ([`harmonize`]), cut brain-containing axial slices at 224x224 ([`slicer`]),
//! train a small encoder-decoder segmentation network ([`segnet`]), score
//! predictions with Dice/IoU ([`metrics`]), compare configurations with
//! classical tests ([`stats`]), and drive full train-on-one/test-on-rest
//! experiment matrices over real or synthetic datasets ([`bench`]).

pub mod bench;
pub mod error;
pub mod harmonize;
pub mod metrics;
pub mod segnet;
pub mod slicer;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
