//! Volt-var control testbed: radial feeder power flow, a factored
//! double-DQN voltage-control agent, gradient-based observation attacks,
//! and adversarial training.

pub mod attacks;
pub mod devices;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod feeder;
pub mod grid;
pub mod qnet;
pub mod trainer;

pub use error::{Error, Result};
