use thiserror::Error;

/// Errors produced by the library. CLI exit codes are derived from
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("shape mismatch at node `{node}`: {detail}")]
    NodeShape { node: String, detail: String },

    #[error("non-finite value produced at node `{0}`")]
    NonFinite(String),

    #[error("unknown name `{0}`")]
    UnknownName(String),

    #[error("`{0}` is neither a tap nor a parameter")]
    NotDifferentiable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error ({field}): {detail}")]
    Checkpoint { field: &'static str, detail: String },

    #[error("missing table cell: {0}")]
    MissingCell(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// 1 = usage, 2 = data, 3 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownName(_) => 1,
            Error::Data(_) | Error::Checkpoint { .. } | Error::Io(_) | Error::Json(_) | Error::MissingCell(_) => 2,
            Error::Shape(_)
            | Error::NodeShape { .. }
            | Error::NonFinite(_)
            | Error::NotDifferentiable(_)
            | Error::Undefined(_) => 3,
        }
    }
}
