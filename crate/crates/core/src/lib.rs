//! Tiny vision transformer with pluggable patchify / convolutional stems.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` arrays and a define-by-run reverse-mode tape.
//! - [`nn`]: convolution, batch/layer norm, scaled ReLU, GELU, attention, FFN variants.
//! - [`stem`]: component-string grammar (`3Conv+3BN+3ReLU+1Proj`) and stem modules.
//! - [`model`]: stem + pre-norm encoder + class-token head, with per-layer token traces.
//! - [`diagnostics`]: token cosine similarity, operator norms, and verifiers for the
//!   scaled-ReLU rescaling identity and the token-matrix norm bounds.
//! - [`train`]: AdamW / SAM, warmup-cosine schedule, divergence detection, datasets
//!   and the training loop.

pub mod diagnostics;
pub mod error;
pub mod model;
pub mod nn;
pub mod stem;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
