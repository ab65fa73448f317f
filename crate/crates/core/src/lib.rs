//! Over-the-air federated learning under heterogeneous fading.
//!
//! Devices upload gradients by analog superposition with truncated channel
//! inversion; the parameter server rescales the received sum. Non-uniform
//! participation biases the learned objective but lowers update variance.
//! This crate simulates that system, evaluates the resulting stationarity
//! bound, designs pre-scalers by successive convex approximation from
//! statistical CSI only, and compares against baseline power-control schemes.


pub mod baselines;
pub mod bound;
pub mod channel;
pub mod error;
pub mod harness;

pub mod learner;
pub mod linalg;
pub mod network;
pub mod ota;
pub mod rng;
pub mod sca;


pub use error::{Error, Result};
pub use network::NetworkConfig;
pub use ota::{GradientEstimate, PowerControlDesign};
