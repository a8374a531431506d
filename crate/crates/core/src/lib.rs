//! Audio-visual question answering with progressive spatio-temporal perception.
//!
//! The crate bundles a small reverse-mode autodiff engine, a binary feature
//! store with a synthetic scene generator, the network itself, a training and
//! evaluation harness, and an analytic cost profiler.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod feature_store;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod profiler;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use config::{Ablation, ModelConfig, SynthSpec, TrainConfig};
pub use error::{Error, FormatError, Result};
pub use model::PstpNet;
pub use tensor::{Precision, Scalar, Tensor};
