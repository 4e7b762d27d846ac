//! Matched-embeddings cascade speech translation, desk scale.
//!
//! A toy CTC speech recognizer, a frozen machine-translation model, and
//! an "exporter" network trained to re-embed recognizer encodings into
//! the translator's input space — plus the autodiff, optimizer, data
//! synthesis, file formats, and metrics needed to train and evaluate
//! the whole cascade deterministically on CPU.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: one stable code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::Io(_) => 6,
        }
    }
}
