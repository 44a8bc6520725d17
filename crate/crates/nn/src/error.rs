use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: &'static str, detail: String },
    #[error("backward called on an empty or foreign graph")]
    GraphNotRecorded,
    #[error("backward requires a scalar output, got dims {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> NnError {
    NnError::DimMismatch { op, detail: detail.into() }
}
