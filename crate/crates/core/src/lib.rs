//! Simulation and training laboratory for hypernetwork-conditioned
//! frequency-domain digital predistortion in multi-user MIMO-OFDM
//! transmitters.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod mimo;
pub mod pa;
pub mod waveform;
pub mod tddpd;
pub mod nn;
pub mod metrics;
pub mod fddpd;
pub mod harness;
