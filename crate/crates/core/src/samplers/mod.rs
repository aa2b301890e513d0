//! The three sampler families and the steps they share.
//!
//! Every iteration runs, in order: the family-specific Step 1 on `(q, x)`,
//! the time-shift and scale moves, a draw of `h`, then `sigma_eps2`,
//! `lambda` and `sigma_h2`.

pub mod conditionals;
pub mod gig;
pub mod ktuple;
pub mod marginal;
pub mod site;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{BgState, Hyperpriors, ModelDims};
use crate::ChainRng;

pub use conditionals::{
    circshift, sample_h, sample_lambda, sample_sigma_eps, sample_sigma_h, shift_log_ratio,
    timeshift_scale_move, IrConditional, ShiftOutcome,
};
pub use gig::sample_gig;
pub use ktuple::{step1_ktuple, KTupleTables};
pub use marginal::{conditional_mean_x, step1_marginal, step1_marginal_inspect, MarginalState, SiteVisit};
pub use site::{site_conditional, step1_site, SiteConditional};

/// Bernoulli rates are clamped to this distance from 0 and 1 wherever
/// `log(1/lambda - 1)` is needed.
pub const RATE_GUARD: f64 = 1e-12;

pub const DEFAULT_ETA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerVariant {
    Hybrid,
    KTuple(usize),
    PartiallyMarginalized,
}

/// Step-1 family plus the time-shift proposal probability `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerKind {
    pub variant: SamplerVariant,
    pub eta: f64,
}

impl SamplerKind {
    pub fn hybrid() -> Self {
        Self {
            variant: SamplerVariant::Hybrid,
            eta: DEFAULT_ETA,
        }
    }

    pub fn ktuple(k: usize) -> Result<Self> {
        let kind = Self {
            variant: SamplerVariant::KTuple(k),
            eta: DEFAULT_ETA,
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn marginal() -> Self {
        Self {
            variant: SamplerVariant::PartiallyMarginalized,
            eta: DEFAULT_ETA,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        self.eta = eta;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if let SamplerVariant::KTuple(k) = self.variant {
            if !(1..=ktuple::MAX_K).contains(&k) {
                return Err(Error::Domain(format!("tuple size {k} not in 1..=4")));
            }
        }
        if !(self.eta > 0.0 && self.eta < 0.5) {
            return Err(Error::Domain(format!("eta = {} not in (0, 1/2)", self.eta)));
        }
        Ok(())
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            SamplerVariant::Hybrid => write!(f, "hybrid"),
            SamplerVariant::KTuple(k) => write!(f, "ktuple:{k}"),
            SamplerVariant::PartiallyMarginalized => write!(f, "pm"),
        }
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::hybrid()),
            "pm" | "marginal" => Ok(Self::marginal()),
            _ => {
                let k = s
                    .strip_prefix("ktuple:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Domain(format!("unknown sampler '{s}'")))?;
                Self::ktuple(k)
            }
        }
    }
}

/// Per-chain event counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub iterations: u64,
    pub shift_proposals: u64,
    pub shift_accepts: u64,
    pub scale_skips: u64,
    pub gig_failures: u64,
    pub downdate_fallbacks: u64,
    pub drift_refreshes: u64,
    pub drift_excursions: u64,
}

/// Blocks resampled after Step 1. Freezing a block keeps its value from the
/// starting state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Updates {
    /// Time-shift and scale moves plus the draw of `h`.
    pub ir: bool,
    /// `sigma_eps2`, `lambda` and `sigma_h2`.
    pub hyper: bool,
}

impl Default for Updates {
    fn default() -> Self {
        Self {
            ir: true,
            hyper: true,
        }
    }
}

/// Observed data plus everything fixed for the lifetime of a chain.
#[derive(Debug, Clone)]
pub struct Sampler {
    dims: ModelDims,
    z: Vec<f64>,
    priors: Hyperpriors,
    kind: SamplerKind,
    updates: Updates,
}

impl Sampler {
    pub fn new(dims: ModelDims, z: Vec<f64>, priors: Hyperpriors, kind: SamplerKind) -> Result<Self> {
        dims.validate()?;
        priors.validate()?;
        kind.validate()?;
        check_len("observation", dims.n, z.len())?;
        if let SamplerVariant::KTuple(k) = kind.variant {
            if k > dims.m {
                return Err(Error::Dims(format!("tuple size {k} exceeds M = {}", dims.m)));
            }
        }
        Ok(Self {
            dims,
            z,
            priors,
            kind,
            updates: Updates::default(),
        })
    }

    pub fn with_updates(mut self, updates: Updates) -> Self {
        self.updates = updates;
        self
    }

    pub fn updates(&self) -> Updates {
        self.updates
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn priors(&self) -> &Hyperpriors {
        &self.priors
    }

    /// Step 1 only, with `(h, lambda, sigma_eps2, sigma_h2)` left untouched.
    pub fn step1(&self, state: &mut BgState, rng: &mut ChainRng, stats: &mut ChainStats) -> Result<()> {
        match self.kind.variant {
            SamplerVariant::Hybrid => step1_site(state, &self.z, rng),
            SamplerVariant::KTuple(k) => {
                let tables = KTupleTables::build(&state.h, state.sigma_eps2, state.sigma_x2, k)?;
                step1_ktuple(state, &self.z, &tables, rng)
            }
            SamplerVariant::PartiallyMarginalized => {
                let mut ms = MarginalState::new(state, &self.z)?;
                step1_marginal(state, &self.z, &mut ms, rng, stats)
            }
        }
    }

    /// One full iteration.
    pub fn iterate(&self, state: &mut BgState, rng: &mut ChainRng, stats: &mut ChainStats) -> Result<()> {
        self.step1(state, rng, stats)?;
        if self.updates.ir {
            timeshift_scale_move(state, &self.z, self.kind.eta, rng, stats)?;
            sample_h(state, &self.z, rng)?;
        }
        if self.updates.hyper {
            state.sigma_eps2 = sample_sigma_eps(state, &self.z, self.dims, &self.priors, rng)?;
            state.lambda = sample_lambda(state, &self.priors, rng);
            state.sigma_h2 = sample_sigma_h(state, &self.priors, rng);
        }
        stats.iterations += 1;
        debug_assert!(state.validate(self.dims).is_ok());
        Ok(())
    }
}

pub(crate) fn clamp_rate(lambda: f64) -> f64 {
    lambda.clamp(RATE_GUARD, 1.0 - RATE_GUARD)
}

/// `log(1 / (1 + exp(-t)))` without overflow.
pub(crate) fn log_sigmoid_prob(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic, reference_ir};
    use rand::SeedableRng;

    #[test]
    fn sampler_names_round_trip() {
        for s in ["hybrid", "ktuple:1", "ktuple:2", "ktuple:3", "ktuple:4", "pm"] {
            assert_eq!(s.parse::<SamplerKind>().unwrap().to_string(), s);
        }
        assert!("ktuple:5".parse::<SamplerKind>().is_err());
        assert!("gibbs".parse::<SamplerKind>().is_err());
        assert!(SamplerKind::hybrid().with_eta(0.5).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid_prob(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid_prob(1e4).abs() < 1e-300);
        assert!((log_sigmoid_prob(-1e4) + 1e4).abs() < 1e-9);
    }

    #[test]
    fn invariants_hold_over_long_runs() {
        let dims = ModelDims::new(40, 20).unwrap();
        let h = reference_ir(20).unwrap();
        let data = generate_synthetic(dims, 0.1, 1e-2, &h, 2).unwrap();
        for kind in [
            SamplerKind::hybrid(),
            SamplerKind::ktuple(2).unwrap(),
            SamplerKind::ktuple(4).unwrap(),
            SamplerKind::marginal(),
        ] {
            let sampler = Sampler::new(dims, data.z.clone(), Hyperpriors::default(), kind).unwrap();
            let mut rng = ChainRng::seed_from_u64(1);
            let mut state = BgState::initial(dims, &Hyperpriors::default(), &mut rng);
            let mut stats = ChainStats::default();
            for _ in 0..2_500 {
                sampler.iterate(&mut state, &mut rng, &mut stats).unwrap();
                state.validate(dims).unwrap();
            }
            assert_eq!(stats.iterations, 2_500);
        }
    }

    #[test]
    fn frozen_blocks_stay_put() {
        let dims = ModelDims::new(30, 20).unwrap();
        let h = reference_ir(20).unwrap();
        let data = generate_synthetic(dims, 0.1, 1e-2, &h, 3).unwrap();
        let frozen = Updates {
            ir: false,
            hyper: false,
        };
        let sampler = Sampler::new(dims, data.z.clone(), Hyperpriors::default(), SamplerKind::hybrid())
            .unwrap()
            .with_updates(frozen);
        let mut rng = ChainRng::seed_from_u64(5);
        let mut state = BgState::initial(dims, &Hyperpriors::default(), &mut rng);
        let start = state.clone();
        let mut stats = ChainStats::default();
        for _ in 0..20 {
            sampler.iterate(&mut state, &mut rng, &mut stats).unwrap();
        }
        assert_eq!(state.h, start.h);
        assert_eq!(
            (state.lambda, state.sigma_eps2, state.sigma_h2),
            (start.lambda, start.sigma_eps2, start.sigma_h2)
        );
        assert_eq!(stats.shift_proposals + stats.scale_skips, 0);
    }

    #[test]
    fn iterations_are_reproducible() {
        let dims = ModelDims::new(30, 20).unwrap();
        let h = reference_ir(20).unwrap();
        let data = generate_synthetic(dims, 0.1, 1e-2, &h, 9).unwrap();
        let sampler =
            Sampler::new(dims, data.z.clone(), Hyperpriors::default(), SamplerKind::marginal()).unwrap();
        let run = || {
            let mut rng = ChainRng::seed_from_u64(77);
            let mut s = BgState::initial(dims, &Hyperpriors::default(), &mut rng);
            let mut stats = ChainStats::default();
            for _ in 0..50 {
                sampler.iterate(&mut s, &mut rng, &mut stats).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
