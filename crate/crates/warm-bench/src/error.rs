use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown preset {0:?}; expected one of exp-lmc, exp-corrupt, exp-theory, exp-select, exp-bon, exp-rl")]
    UnknownPreset(String),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<ConfigError>),
    #[error(transparent)]
    Core(#[from] warm_core::WarmError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    /// Process exit code: 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::UnknownPreset(_) | BenchError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
