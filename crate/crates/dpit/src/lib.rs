//! Dual-prior interaction transformer for single-image reflection removal:
//! synthetic data generation, the linear-correction prior network, the
//! dual-stream separation transformer, training/evaluation harness, and
//! analytic complexity accounting.

pub mod ckpt;
pub mod config;
pub mod complexity;
pub mod data;
pub mod dscra;
pub mod error;
pub mod metrics;
pub mod gradcheck;
pub mod harness;
pub mod interaction;
pub mod llcn;
pub mod losses;
pub mod network;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
