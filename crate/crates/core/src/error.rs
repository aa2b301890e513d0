use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("state invariant violated: {0}")]
    Invariant(String),
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("matrix is not positive definite (pivot {pivot} is {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("triangular matrix is singular at diagonal entry {0}")]
    Singular(usize),
    #[error("rank-1 downdate breakdown: rho^2 = {rho2:e}")]
    DowndateBreakdown { rho2: f64 },
    #[error("GIG sampler exceeded {0} rejections")]
    GigRejections(usize),
    #[error("diagnostic undefined: {0}")]
    Diagnostic(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Length {
            what,
            expected,
            actual,
        })
    }
}
