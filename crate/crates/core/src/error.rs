use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A value does not fit the narrow integer width it must be stored in.
    #[error("range error: {0}")]
    Range(String),
    /// Tensor or filter dimensions are not supported by an engine or layer.
    #[error("shape error: {0}")]
    Shape(String),
    /// A stream protocol was violated (re-read, out-of-order, starvation).
    #[error("sequencing error: {0}")]
    Sequencing(String),
    /// A model cannot be mapped onto the engine rounds.
    #[error("plan error: {0}")]
    Plan(String),
    /// Wraps an engine error with the round it happened in.
    #[error("round {round}: {source}")]
    InRound { round: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::InRound { round, source: Box::new(self) }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
