use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("non-numeric cell at data row {row}, column `{column}`: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("missing value at data row {row}, column `{column}`")]
    MissingValue { row: usize, column: String },

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("series has {rows} usable rows, fewer than the window length {window}")]
    TooShort { rows: usize, window: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("diffusion step {k} outside 1..={t}")]
    StepOutOfRange { k: usize, t: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("window cache: {0}")]
    Cache(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("optimization did not descend: {0}")]
    NoDescent(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by invalid configuration rather than data or numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::MissingColumn(_) | Error::Manifest(_)
        )
    }

    /// Errors caused by the input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv(_)
                | Error::NonNumeric { .. }
                | Error::MissingValue { .. }
                | Error::TooShort { .. }
                | Error::Cache(_)
                | Error::Checkpoint(_)
                | Error::Shape(_)
                | Error::Metric(_)
        )
    }

    /// Numeric aborts (non-finite losses or samples).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NoDescent(_))
    }
}
