//! Conditional normalizing flows for state estimation.
//!
//! The crate covers the whole pipeline: a driving simulator that produces
//! unimodal and bimodal trajectory datasets, a small reverse-mode autodiff
//! engine, flows built from permutation, LU-linear and masked affine
//! autoregressive layers, sequence conditioners (RNN, GRU, LSTM,
//! transformer), UKF and mixture-density baselines, and the k-NN KL and
//! likelihood metrics used to compare them.

pub mod autodiff;
pub mod baselines;
pub mod conditioners;
pub mod density;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod par;

pub use error::{Error, Result};
