//! Multivariate time-series imputation with a channel-head-bound CNN-Transformer.
//!
//! The crate carries its own small tensor type and reverse-mode autodiff
//! ([`tensor`], [`autodiff`]), the imputation network ([`model`]), masked
//! self-supervised training ([`training`]), missingness simulation
//! ([`masking`]), data ingestion ([`data`]) and evaluation tooling ([`eval`]).
//! The [`cli`] module backs the `t1` binary.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
