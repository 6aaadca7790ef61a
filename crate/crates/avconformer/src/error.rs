use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` and `Usage` map to CLI exit code 2, everything else to 1.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("no feasible alignment: target needs at least {required} frames, got {given} (loss = +inf)")]
    Infeasible { required: usize, given: usize },
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("non-finite value in {what} (step {step})")]
    NonFinite { what: String, step: usize },
    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            _ => 1,
        }
    }
}
