use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, counts, finiteness).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Support set whose statistics cannot define a prototype (e.g. zero mean direction).
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("sampling gave up after {attempts} draws")]
    SamplingTimeout { attempts: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn ensure_same_dim(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(contract(format!("{what}: dimension mismatch ({a} vs {b})")));
    }
    Ok(())
}
