//! Files, training driver, evaluation suites and command line for
//! `cointeract-core`.

use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod image;
pub mod trainer;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("config hash mismatch: expected {expected}, checkpoint has {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] cointeract_core::ModelError),
    #[error(transparent)]
    Token(#[from] cointeract_core::tokenization::TokenError),
    #[error(transparent)]
    Train(#[from] cointeract_core::training::TrainError),
    #[error(transparent)]
    Sample(#[from] cointeract_core::sampling::SampleError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
