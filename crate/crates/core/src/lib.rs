//! Cross-modal adaptive message passing (CAMP) for text-image matching.
//!
//! The crate bundles everything needed to train and evaluate the model at
//! desk scale: a small reverse-mode autodiff engine, region and word encoders,
//! the message-passing core, training objectives, an Adam training loop,
//! recall@K evaluation and file formats for features and checkpoints.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the width for the common cases.

pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradient_suite;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{grad_check, GradCheckReport, Pointwise, Tape, Var};
pub use error::{CampError, Result};
pub use model::{CampParams, ModelConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type CampParams32 = CampParams<f32>;
pub type CampParams64 = CampParams<f64>;
