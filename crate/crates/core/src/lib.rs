//! Blind Bernoulli-Gaussian deconvolution by MCMC.
//!
//! The observation model is `z = h * x + noise` with `x` a sparse
//! Bernoulli-Gaussian spike train and `h` an unknown finite impulse response.
//! Three samplers share the same target: a site-by-site hybrid sampler, a
//! grouped `K`-tuple Gibbs sampler and a partially marginalized sampler that
//! maintains a Cholesky factor across single-site flips.

// Index loops mirror the matrix algebra; `!(a > b)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod samplers;

pub use error::{Error, Result};
pub use model::{BgState, ConvOperator, Hyperpriors, ModelDims, SyntheticData};
pub use samplers::{ChainStats, Sampler, SamplerKind, SamplerVariant, Updates};

/// Random number generator used by every chain.
pub type ChainRng = rand_chacha::ChaCha8Rng;
