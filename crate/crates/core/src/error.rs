use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite logit")]
    NonFiniteLogit,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("attention row {0} has no allowed positions")]
    EmptyMaskRow(usize),
    #[error("invalid probability vector: {0}")]
    InvalidProb(String),
    #[error("token {token} out of vocabulary range {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    #[error("contrastive branch requires two active experts")]
    ContrastNeedsTwoExperts,
    #[error("parallel final step invoked at depth {depth}, expected {expected}")]
    ParallelStepDepth { depth: usize, expected: usize },
    #[error("token not proposed by draft")]
    TokenNotProposed,
    #[error("empty residual")]
    EmptyResidual,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("sequence too short: {0}")]
    SequenceTooShort(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
