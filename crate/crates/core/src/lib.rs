//! Desk-scale gradient leakage laboratory.
//!
//! Trains small image classifiers under standard, DP-SGD and PDP-SGD
//! regimes, simulates a federated round with an intercepting tap, mounts the
//! gradient-matching reconstruction attack and scores the result.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod dp;
pub mod error;
pub mod fedsim;
pub mod metrics;
pub mod models;
pub mod runner;
pub mod tensor;

pub use autodiff::{DualGradient, DualGradientRequest, OpKind, Tape, Var};
pub use data::Dataset;
pub use error::{Error, Result};
pub use fedsim::{GradientCapture, Regime, RegimeKind};
pub use models::{ModelSpec, ParamSet};
pub use tensor::Tensor;
