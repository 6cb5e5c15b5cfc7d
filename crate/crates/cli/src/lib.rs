//! Dataset tooling, sessions and evaluation around the `splat4d` core.

pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod synth;

pub use error::{CliError, Result};
pub use splat4d::metrics;
