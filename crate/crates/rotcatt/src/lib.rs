//! 2.5D volumetric segmentation with rotatory inter-slice attention.
//!
//! A nested-skip CNN encoder produces multiscale feature maps; the three
//! finer scales are patch-embedded, run through per-scale transformer
//! stacks, enriched with an inter-slice rotatory attention vector, gated
//! against decoder features channel-wise, and decoded to per-class logits.
//! The crate also ships the training objective (background-excluding Dice +
//! soft IoU), hard evaluation metrics (DSC/IoU/Hausdorff), a synthetic
//! phantom generator, bit-exact volume/checkpoint I/O, and the `rotcatt`
//! CLI for training, evaluation, and the rotatory-attention ablation.

pub mod config;
pub mod error;
pub mod params;
pub mod tensor;

pub use config::{derive_shapes, validate_tensor, ModelConfig, ShapePlan};
pub use error::{Error, Result};
