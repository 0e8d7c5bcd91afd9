//! Warmup-stable-decay learning-rate schedules and the tooling to study
//! their cooldown phase on tiny decoder-only transformers: training runs,
//! permutation sweeps, bias-variance and shift-deviation analysis, model
//! souping and 2D loss-landscape scans.

pub mod analysis;
pub mod data;
pub mod error;
pub mod landscape;
pub mod exec;
pub mod model;
pub mod optimizer;
pub mod real;
pub mod schedules;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
