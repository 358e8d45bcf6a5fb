use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("point behind camera (index {index}, z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("bad prior: {0}")]
    BadPrior(String),
    #[error("damped normal matrix is not positive definite")]
    SingularSystem,
    #[error("non-finite state: {0}")]
    NonFiniteState(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config hash mismatch: expected {expected:016x}, found {found:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(what()))
    }
}
