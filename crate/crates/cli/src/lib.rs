//! Pipeline orchestration behind the `voxweave` binary.

pub mod config;
pub mod pipeline;

pub use config::Config;
pub use pipeline::{Manifest, StageTime};

/// Failure of a CLI run, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: voxweave::Error,
    },
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
    pub const GATEWAY: i32 = 5;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use voxweave::gateway::GatewayError;
        use voxweave::Error;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Stage { source, .. } => match source {
                Error::Io { .. }
                | Error::Format(_)
                | Error::Parse { .. }
                | Error::UnsupportedFormat(_)
                | Error::Image(_) => exit::IO,
                Error::InvalidInput(_) | Error::DimensionMismatch { .. } => exit::CONFIG,
                Error::Divergence { .. } => exit::DIVERGENCE,
                Error::Gateway(GatewayError::Config(_)) => exit::CONFIG,
                Error::Gateway(_) => exit::GATEWAY,
            },
        }
    }
}
