//! Adversarial patch attacks on optical-flow estimators.

pub mod attack;
pub mod classical;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod imaging;
pub mod networks;
pub mod patch;
pub mod synth;
pub mod tensor;
pub mod zero_flow;

pub use error::{Error, Result};
