use thiserror::Error;

/// Errors raised by the planning library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Two robots share (numerically) the same position, so a direction or
    /// derivative between them is undefined.
    #[error("degenerate geometry: robots {0} and {1} are coincident")]
    DegenerateGeometry(usize, usize),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A message was addressed to a robot that is not a communication
    /// neighbour of the sender at send time.
    #[error("protocol violation at step {step}: robot {sender} sent to non-neighbour {receiver}")]
    ProtocolViolation {
        sender: usize,
        receiver: usize,
        step: u64,
    },

    #[error("malformed message payload: {0}")]
    Payload(String),

    #[error("invalid scenario:\n{}", format_field_errors(.0))]
    InvalidScenario(Vec<FieldError>),

    #[error("i/o error: {0}")]
    Io(String),
}

/// One violated scenario constraint, addressed by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn format_field_errors(errs: &[FieldError]) -> String {
    errs.iter()
        .map(|e| format!("  - {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
