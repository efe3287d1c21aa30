use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform to the operation's contract.
    #[error("shape error: {0}")]
    Shape(String),
    /// Caller-supplied data violates a precondition (bad id, bad alphabet, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training produced non-finite losses on consecutive batches.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than internal failure.
    /// The CLI maps these to exit code 2, everything else to 3.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::Config(_) | Error::Dataset(_) | Error::Checkpoint(_)
        )
    }
}
