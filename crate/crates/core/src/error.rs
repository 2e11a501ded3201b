// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

/// Every failure the lab can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("input of {len} tokens exceeds context of {max}")]
    Length { len: usize, max: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("training diverged: loss rose for {consecutive} consecutive epochs (epoch {epoch})")]
    Divergence { epoch: usize, consecutive: usize },

    #[error("generation error for {phenomenon}: {message}")]
    Generation { phenomenon: String, message: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("incomplete report: {0}")]
    IncompleteReport(String),

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
