use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The variants map onto the failure classes the public operations can hit:
/// shape/argument misuse, numeric blow-ups, lifecycle misuse (e.g. a second
/// backward pass), incompatible configurations, and file problems.
#[derive(Debug, Error)]
pub enum MocError {
    /// Tensor shapes or channel counts do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument or flag value is out of its legal range.
    #[error("argument error: {0}")]
    Argument(String),

    /// A computation produced NaN/Inf or otherwise left the finite domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called in a state that does not permit it.
    #[error("state error: {0}")]
    State(String),

    /// Two components that must agree (checkpoint vs. model vs. dataset) do not.
    #[error("config error: {0}")]
    Config(String),

    /// A text input (annotation CSV, size string, ...) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A binary or structured file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MocError>;
