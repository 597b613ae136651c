use thiserror::Error;

/// Every fallible operation in the crate returns this.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("did not converge: {msg} (last iterate {last})")]
    Convergence { msg: String, last: f64 },
    #[error("singular: {0}")]
    Singularity(String),
    #[error("resource limit: needs {required} bytes, budget is {budget}")]
    Resource { required: u64, budget: u64 },
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn check_finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        domain(format!("{name} must be finite, got {x}"))
    }
}
