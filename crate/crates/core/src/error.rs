use thiserror::Error;

/// Errors raised anywhere in the workbench.
///
/// The `Display` form is a single line so the CLI can print it verbatim as a
/// machine-parsable diagnostic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("perturbation error: {0}")]
    Perturbation(String),

    #[error("numerical error in {block} (slot {slot}): {detail}")]
    Numerical {
        block: &'static str,
        slot: usize,
        detail: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fit error: {reason} (best residual {best_residual})")]
    Fit { reason: String, best_residual: f64 },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: String, found: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag naming the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Protocol(_) => "protocol",
            Error::Perturbation(_) => "perturbation",
            Error::Numerical { .. } => "numerical",
            Error::NonFinite(_) => "non-finite",
            Error::Fit { .. } => "fit",
            Error::MissingData(_) => "missing-data",
            Error::Format(_) => "format",
            Error::SchemaVersion { .. } => "schema-version",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
