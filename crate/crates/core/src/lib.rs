//! Desk-scale self-distillation for vision transformers.
//!
//! A from-scratch implementation of a bi-level self-distillation framework:
//! a miniature ViT with an extra class token, an EMA teacher, stratified
//! query sampling with skip-free attention pooling, multimodal targets, and
//! the full training / evaluation / diagnostics harness around it.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Result, UdiError};
pub use tensor::tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
