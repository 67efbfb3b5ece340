use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument outside its mathematical domain (negative volume,
    /// probability outside [0, 1], ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The caller broke an operation's precondition (length mismatch,
    /// enumeration cap exceeded, unsupported model layout, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A computation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::contract(format!(
            "{what}: length mismatch (expected {expected}, got {got})"
        )));
    }
    Ok(())
}

pub(crate) fn check_prob(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("{what} must lie in [0, 1], got {p}")));
    }
    Ok(())
}
