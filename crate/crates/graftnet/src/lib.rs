//! Dual-branch salient object detection on CPU: a CNN pyramid and a
//! transformer pyramid grafted together by a cross-attention module, with the
//! attention-guided loss, SOD metrics, a synthetic data pipeline, and a
//! deterministic trainer. Everything runs on a hand-rolled reverse-mode
//! autodiff tape; f32 for training, f64 for gradient verification.

pub mod checks;
pub mod cmgm;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{GraftError, Result};
pub use tensor::tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
