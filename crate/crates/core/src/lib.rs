//! Desk-scale engine for hierarchical vector quantization with
//! multi-granularity text alignment.
//!
//! An image is compressed into three code grids at increasing
//! down-sampling factors; each grid is quantized against a learnable
//! codebook and aligned with word, phrase, and sentence embeddings of
//! the image's caption through sampled, entropically regularized
//! optimal transport. Everything runs on a small reverse-mode
//! autodiff engine over dense `f64` tensors, so the whole model is
//! trainable and gradient-checkable on one CPU core.

pub mod align;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod transport;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::{GradMap, ParamId, Tape, Tensor};
