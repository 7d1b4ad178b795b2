//! Fully convolutional multi-class segmentation of chest radiographs.
//!
//! * [`tensor`]: NCHW tensors, layer primitives and reverse-mode autodiff.
//! * [`model`]: the four encoder/decoder architectures, checkpoints and ensembles.
//! * [`data`]: dataset ingestion, ground-truth encodings, normalization, splits
//!   and a synthetic generator.
//! * [`train`]: class-weighted Dice / cross-entropy objectives, ADAM and the
//!   training loop.
//! * [`eval`]: thresholded overlap metrics, surface distance, Wilcoxon tests
//!   and report tables.

pub mod data;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
