//! BiLSTM-Conformer traffic classification over 5G physical-channel records.
//!
//! The pipeline runs end to end on synthetic traces: session generation
//! ([`synth`]), line-oriented record parsing ([`record`]), frame-structured
//! feature extraction ([`preprocess`]), a small autograd substrate
//! ([`tensor`]), the BiLSTM-Conformer model ([`bilstm`], [`conformer`],
//! [`model`]), training ([`train`]) and evaluation ([`eval`]).
//!
//! All numerics are generic over the scalar type via [`Scalar`]; `f32` is the
//! production path and `f64` backs the finite-difference gradient checks.

pub mod bilstm;
pub mod conformer;
pub mod eval;
pub mod model;
pub mod num;
pub mod preprocess;
pub mod record;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use num::Scalar;

/// Production-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-precision tensor (gradient checks).
pub type Tensor64 = tensor::Tensor<f64>;

/// Production-precision model.
pub type BiLCNet32 = model::BiLCNet<f32>;
/// Verification-precision model.
pub type BiLCNet64 = model::BiLCNet<f64>;
