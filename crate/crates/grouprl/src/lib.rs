//! Desk-scale laboratory for group-relative policy optimization.
//!
//! Implements the clipped-surrogate objective with interchangeable
//! group advantage transforms (z-score, equidistant rank, smoothed
//! soft-rank), a small differentiable categorical sequence policy,
//! simulated miscalibrated reward models, a paired-arm training loop,
//! an oracle-judged evaluation suite, and Monte Carlo checks of the
//! advantage second-moment and gradient-variance identities.

pub mod advantage;
pub mod config;
pub mod evalsuite;
pub mod objective;
pub mod policy;
pub mod rewardsim;
pub mod seeding;
pub mod theorylab;
pub mod trainer;

mod error;

pub use error::{Error, Result};
