use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("untunable subject {subject}: no voxels in {rois} above ceiling threshold {threshold}")]
    UntunableSubject {
        subject: String,
        rois: String,
        threshold: f64,
    },

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),

    #[error("undefined test: {0}")]
    UndefinedTest(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 config, 3 data validation, 4 numerical, 5 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Validation(_)
            | Error::Format(_)
            | Error::EmptyDataset(_)
            | Error::UntunableSubject { .. }
            | Error::DegenerateProbe(_)
            | Error::UndefinedTest(_)
            | Error::Json(_) => 3,
            Error::Numerical(_) => 4,
            Error::Io { .. } => 5,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
