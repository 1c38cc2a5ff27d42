//! Pipeline driver behind the `tgnet` binary: configuration, stage
//! orchestration with resumable manifests, and the extraction experiment
//! series.

pub mod config;
pub mod experiment;
pub mod manifest;
pub mod stages;

use thiserror::Error;

/// Pipeline failures, each mapped to a distinct process exit code.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad or missing configuration (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent input data (exit 3).
    #[error("data error: {0}")]
    Data(String),
    /// A solver failed to reach its tolerance (exit 4).
    #[error("non-convergence: {0}")]
    NonConvergence(String),
    /// Filesystem failure (exit 5).
    #[error("i/o error: {0}")]
    Io(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::NonConvergence(_) => 4,
            PipelineError::Io(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        PipelineError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<tgnet::net::NetError> for PipelineError {
    fn from(e: tgnet::net::NetError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<tgnet::demand::DemandError> for PipelineError {
    fn from(e: tgnet::demand::DemandError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<tgnet::assign::AssignError> for PipelineError {
    fn from(e: tgnet::assign::AssignError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<tgnet::raster::RasterError> for PipelineError {
    fn from(e: tgnet::raster::RasterError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<tgnet::uot::UotError> for PipelineError {
    fn from(e: tgnet::uot::UotError) -> Self {
        PipelineError::Data(e.to_string())
    }
}
