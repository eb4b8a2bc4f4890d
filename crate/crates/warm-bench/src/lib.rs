//! Experiment presets on top of `warm-core`: config handling, the per-seed
//! computations and artifact writing.

// `!(x > 0.0)` is how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod presets;

pub use config::{validate_config, ConfigError, ExperimentConfig};
pub use error::{BenchError, Result};
pub use presets::{run_preset, Manifest, Preset};
