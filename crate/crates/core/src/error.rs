use thiserror::Error;

/// Errors produced by dataset construction, fitting, and serialization.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Input data violates an invariant (treatment coding, weights, outcomes).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A cell of an input file failed to parse or validate.
    #[error("data row {row}, column '{column}': {message}")]
    CsvCell {
        row: usize,
        column: String,
        message: String,
    },

    /// A required column is absent from the input file.
    #[error("missing column '{0}'")]
    MissingColumn(String),

    /// Vector or matrix shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A serialized model could not be interpreted.
    #[error("model format: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
