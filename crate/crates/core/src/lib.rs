//! Uncertainty estimation and evaluation for model-level mixtures of experts
//! over dense per-pixel class probabilities.

pub mod calibration;
pub mod cli;
pub mod combine;
pub mod conditional;
pub mod error;
pub mod json;
pub mod manifest;
pub mod npy;
pub mod render;
pub mod report;
pub mod rng;
pub mod shift;
pub mod types;
pub mod uncertainty;

pub use error::{Error, Result};
pub use types::{
    ExpertStack, GateKind, GateWeights, LabelMap, Measure, ProbTensor, Shape, Strictness,
    UncertaintyMap, ValidationReport,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
