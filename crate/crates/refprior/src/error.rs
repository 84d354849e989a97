//! Error types shared across the crate.

/// Crate-wide error type.
///
/// `kl_divergence` never produces an error for a mismatched support; it
/// returns the infinity sentinel instead. Errors are reserved for inputs the
/// caller got wrong or models that cannot support the requested operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally invalid arguments: mismatched lengths, out-of-range
    /// indices, unknown options.
    #[error("usage error: {0}")]
    Usage(String),

    /// A binary input file does not match its declared format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The model carries no information for the requested quantity
    /// (e.g. a constant channel has an identically zero Fisher information).
    #[error("degenerate model: {0}")]
    Degenerate(String),

    /// Conditioning on observed data left only clamp-dominated masses, so
    /// the resulting prior would be an artifact of the likelihood floor.
    #[error("degenerate conditioning: {0}")]
    DegenerateConditioning(String),

    /// The observed outcome has zero likelihood under every atom.
    #[error("contradictory observation: {0}")]
    Contradiction(String),

    /// A non-finite value surfaced during iterative computation.
    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
