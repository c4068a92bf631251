use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CmglError> = std::result::Result<T, E>;

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Training,
}

#[derive(Debug, Error)]
pub enum CmglError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: row {row}, column {col}: {msg}")]
    Parse {
        file: String,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("sample alignment failed for {modality}: missing from labels [{}]; missing from modality [{}]", .missing_in_labels.join(", "), .missing_in_modality.join(", "))]
    Alignment {
        modality: String,
        missing_in_labels: Vec<String>,
        missing_in_modality: Vec<String>,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("cannot stratify: class {class} has {count} samples, need at least {needed}")]
    Stratification {
        class: usize,
        count: usize,
        needed: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{stage} training diverged at epoch {epoch}: {msg}")]
    Training {
        stage: &'static str,
        epoch: usize,
        msg: String,
    },

    #[error("graph structure error: {0}")]
    Structural(String),

    #[error("fold {fold}, {stage}: {source}")]
    InFold {
        fold: usize,
        stage: &'static str,
        #[source]
        source: Box<CmglError>,
    },
}

impl CmglError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_fold(self, fold: usize, stage: &'static str) -> Self {
        match self {
            e @ Self::InFold { .. } => e,
            other => Self::InFold {
                fold,
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Config(_) => ErrorKind::Usage,
            Self::Training { .. } | Self::Structural(_) => ErrorKind::Training,
            Self::InFold { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
