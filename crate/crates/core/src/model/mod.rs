//! The message-passing core: cross-modal attention, gated fusion, fused
//! feature pooling and the matching scorer.

mod config;
mod forward;
pub mod pipeline;
pub mod weights;

pub use config::{Aggregation, FusionOp, ModelConfig, Scorer, Variant};
pub use forward::*;
pub use weights::{CampParams, CampWeights, CoreParams, CoreWeights, EncoderParams, EncoderWeights, GruWeights};
