//! Core algorithms for maximum-entropy metacognitive out-of-distribution
//! segmentation.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! only needs `alloc`: dataset types and the procedural toy-scene generator,
//! synthetic-OOD generation by class-subset Gaussian blur, a compact U-Net
//! with hand-written backpropagation, cross-entropy and maximum-entropy
//! training, the metacognitive error-prediction network, and the OOD
//! metrics (AUPRC, FPR-95, mIoU).
//!
//! File formats, checkpoints, timing and the command line live in the
//! companion `memos` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod maxent;
pub mod metacog;
pub mod nn;
pub mod rng;
pub mod seg;
pub mod synth;
pub mod toy;
mod train;

pub use data::{ClassInfo, ClassTaxonomy, DatasetManifest, LabeledImage};
pub use error::{Error, Result};
pub use grid::{BinaryMask, ClassMap, Grid, LabelMap, LogitsMap, ProbabilityMap, RgbImage};
pub use maxent::{EntropyMap, LossBreakdown, MaxEntConfig};
pub use metacog::{MetacogInput, MetacogModelConfig, MetacogNet, MetacogTarget, SoftOodMask};
pub use seg::{SegModelConfig, SegNet, SegmentationModel, TrainParams};
pub use synth::{BlurParams, SynthConfig, SynthesizedSample};
