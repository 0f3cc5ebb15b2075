//! Multimodal depression-severity classifier.
//!
//! A narrative is chunked, embedded and pooled into a 768-d text vector; a
//! teacher-scored 9-d Empathy Vector is projected to 128-d; the two are fused
//! by gated asymmetric cross-modal enhancement and classified into seven
//! severity levels. Everything runs on the crate's own reverse-mode autodiff
//! engine in [`tensor`].

pub mod empathy;
pub mod encoder;
pub mod fusion;
pub mod head;
pub mod model;
pub mod par;
pub mod real;
pub mod tensor;
pub mod train;

pub use empathy::{EmpathyVector, SeverityLabel};
pub use model::{HeaeModel, ModelConfig};
pub use real::Real;
pub use tensor::{Tensor, TensorError};
