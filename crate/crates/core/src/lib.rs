//! Perception-aware trajectory planning around a tracked obstacle, with an
//! optimization-based expert and an imitation-learned student policy.

pub mod assignment;
pub mod costs;
pub mod dataset;
pub mod error;
pub mod expert;
pub mod experiments;
pub mod frames;
pub mod observation;
pub mod scorer;
pub mod sim;
pub mod splines;
pub mod student;
pub mod yaw;

pub use error::{Error, Result};

/// Gravitational acceleration (m/s²).
pub const GRAVITY: f64 = 9.81;
