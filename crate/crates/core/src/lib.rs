//! Monte Carlo simulation of cavity-aided conditional spin squeezing in a
//! dressed-cavity ensemble: closed-form atom-cavity relations, a
//! Gaussian-moment collective-spin state with probe back-action, timed
//! protocols over seeded trials, the analytic noise budget and the
//! experiment drivers built on them.

pub mod budget;
pub mod error;
pub mod params;
pub mod physics;
pub mod spin;

pub use error::{Result, SimError};
pub use params::{Channels, ModelKnobs, SimParams};
pub mod rng;
pub mod sequence;
pub mod stats;
pub mod fit;
pub mod experiments;
pub mod config;
pub mod records;
