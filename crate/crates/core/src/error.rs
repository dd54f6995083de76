use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{routine} did not converge after {sweeps} sweeps")]
    NonConvergence { routine: &'static str, sweeps: usize },

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonConvergence { .. } => "non_convergence",
            Error::NonFinite(_) => "non_finite",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Layer { source, .. } => source.kind(),
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "format",
            Error::Csv(_) => "format",
        }
    }

    /// True when the error, possibly wrapped in a layer context, reports
    /// non-finite numbers.
    pub fn is_non_finite(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::Layer { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }

    pub(crate) fn in_layer(self, layer: usize) -> Error {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                layer,
                source: Box::new(e),
            },
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
