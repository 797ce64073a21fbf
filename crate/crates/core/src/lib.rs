//! Explainable customer micro-segmentation from LSTM state-space trajectories.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the pipeline and the CLI use.

pub mod domain;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod rnn;
pub mod scalar;
pub mod segmentation;
pub mod surrogate;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type SpendingProfile = domain::SpendingProfile<f64>;
pub type CoefficientMatrix = domain::CoefficientMatrix<f64>;
pub type TraitVector = domain::TraitVector<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type Dataset = synth::Dataset<f64>;
pub type LstmModel = rnn::LstmModel<f64>;
pub type Trajectory = rnn::Trajectory<f64>;
pub type DirectionAngles = surrogate::DirectionAngles<f64>;
pub type LinearSurrogate = surrogate::LinearSurrogate<f64>;
pub type ClusterTree = segmentation::ClusterTree;
