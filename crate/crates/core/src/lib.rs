#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Differentially-private federated learning for tabular binary classification.
//!
//! The crate covers the full pipeline: heart-disease data preparation
//! ([`data`]), a dense network with per-example gradients ([`nn`]), SGD/Adam
//! ([`optim`]), DP-SGD with RDP accounting ([`dp`]), synchronous FedAvg over a
//! binary protocol ([`federation`]), and the experiment harness ([`experiments`]).

mod bytes;
pub mod data;
pub mod dp;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
