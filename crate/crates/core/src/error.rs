use std::fmt;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite values passed to {0}")]
    NonFinite(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no usable rows: {0}")]
    EmptyData(String),

    #[error("group `{group}` has {found} sensor(s); at least 3 are required")]
    InsufficientSensors { group: String, found: usize },

    #[error("series `{sensor}` has {len} rows, shorter than the window of {window}")]
    TooShort {
        sensor: String,
        len: usize,
        window: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt model file: {0}")]
    Corrupt(String),

    #[error("{0}")]
    Numeric(NumericFailure),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Diagnostics captured when training produces a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericFailure {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f32,
    pub param_norms: Vec<(String, f32)>,
}

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "non-finite loss {} at epoch {}, batch {}; parameter norms:",
            self.loss, self.epoch, self.batch
        )?;
        for (name, norm) in &self.param_norms {
            write!(f, " {name}={norm:.4e}")?;
        }
        Ok(())
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
