//! Bernoulli-Gaussian convolution model: dimensions, state, convolution
//! operator, priors, joint posterior density and synthetic data.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::ChainRng;

/// Observation length `n`, spike-train length `m` and IR order `p`
/// (the IR has `p + 1` taps). Zero-boundary convolution ties them as
/// `m = n - p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl ModelDims {
    pub fn new(m: usize, p: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Dims("spike train length must be at least 1".into()));
        }
        Ok(Self { n: m + p, m, p })
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n <= self.p || self.m + self.p != self.n {
            return Err(Error::Dims(format!(
                "need n = m + p with m >= 1, got n={} m={} p={}",
                self.n, self.m, self.p
            )));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.p + 1
    }
}

/// Hyperparameters of the conjugate priors: `IG(shape, scale)` on both
/// variances and `Be(a, b)` on the Bernoulli rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperpriors {
    pub ig_shape_eps: f64,
    pub ig_scale_eps: f64,
    pub ig_shape_h: f64,
    pub ig_scale_h: f64,
    pub beta_a: f64,
    pub beta_b: f64,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Self {
            ig_shape_eps: 1.0,
            ig_scale_eps: 1.0,
            ig_shape_h: 1.0,
            ig_scale_h: 1.0,
            beta_a: 1.0,
            beta_b: 1.0,
        }
    }
}

impl Hyperpriors {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ig_shape_eps,
            self.ig_scale_eps,
            self.ig_shape_h,
            self.ig_scale_h,
            self.beta_a,
            self.beta_b,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Domain(format!("hyperpriors must be positive: {self:?}")))
        }
    }
}

/// Full parameter state of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgState {
    pub q: Vec<bool>,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub lambda: f64,
    pub sigma_eps2: f64,
    pub sigma_h2: f64,
    pub sigma_x2: f64,
}

impl BgState {
    /// Initialization used by all samplers: `h` a unit spike at the centre
    /// tap, no spikes, variances drawn from their priors and the Bernoulli
    /// rate from its Beta prior.
    pub fn initial(dims: ModelDims, priors: &Hyperpriors, rng: &mut ChainRng) -> Self {
        let mut h = vec![0.0; dims.taps()];
        h[dims.p.div_ceil(2)] = 1.0;
        let sigma_eps2 = sample_inverse_gamma(priors.ig_shape_eps, priors.ig_scale_eps, rng);
        let sigma_h2 = sample_inverse_gamma(priors.ig_shape_h, priors.ig_scale_h, rng);
        let lambda = sample_beta(priors.beta_a, priors.beta_b, rng);
        Self {
            q: vec![false; dims.m],
            x: vec![0.0; dims.m],
            h,
            lambda,
            sigma_eps2,
            sigma_h2,
            sigma_x2: 1.0,
        }
    }

    pub fn spike_count(&self) -> usize {
        self.q.iter().filter(|&&q| q).count()
    }

    pub fn validate(&self, dims: ModelDims) -> Result<()> {
        check_len("q", dims.m, self.q.len())?;
        check_len("x", dims.m, self.x.len())?;
        check_len("h", dims.taps(), self.h.len())?;
        if let Some(i) = (0..dims.m).find(|&i| !self.q[i] && self.x[i] != 0.0) {
            return Err(Error::Invariant(format!(
                "q[{i}] = 0 but x[{i}] = {}",
                self.x[i]
            )));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Domain(format!("lambda = {} not in (0, 1)", self.lambda)));
        }
        for (name, v) in [
            ("sigma_eps2", self.sigma_eps2),
            ("sigma_h2", self.sigma_h2),
            ("sigma_x2", self.sigma_x2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Zero-boundary convolution by a finite impulse response. Acts as the
/// `n x m` Toeplitz matrix `H` without forming it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvOperator {
    dims: ModelDims,
    h: Vec<f64>,
}

impl ConvOperator {
    pub fn new(dims: ModelDims, h: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        check_len("impulse response", dims.taps(), h.len())?;
        Ok(Self { dims, h })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// `H x`.
    pub fn convolve(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("spike train", self.dims.m, x.len())?;
        let mut out = vec![0.0; self.dims.n];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                add_column(&mut out, &self.h, j, xj);
            }
        }
        Ok(out)
    }

    /// `H' v`, the correlation of `v` with the impulse response.
    pub fn correlate(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("observation", self.dims.n, v.len())?;
        Ok((0..self.dims.m).map(|j| column_dot(&self.h, j, v)).collect())
    }

    /// `h_j' v` for the single column `j` of `H`.
    pub fn column_dot(&self, j: usize, v: &[f64]) -> f64 {
        column_dot(&self.h, j, v)
    }

    /// `v += a * h_j`.
    pub fn add_column(&self, v: &mut [f64], j: usize, a: f64) {
        add_column(v, &self.h, j, a)
    }

    /// Autocorrelation of the impulse response at lags `0..=p`; entry `k`
    /// equals `h_j' h_{j+k}` for any pair of columns of `H`.
    pub fn autocorrelation(&self) -> Vec<f64> {
        autocorrelation(&self.h)
    }

    /// Residual `z - H x`.
    pub fn residual(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_len("observation", self.dims.n, z.len())?;
        let hx = self.convolve(x)?;
        Ok(z.iter().zip(&hx).map(|(a, b)| a - b).collect())
    }
}

#[inline]
pub(crate) fn column_dot(h: &[f64], j: usize, v: &[f64]) -> f64 {
    h.iter().zip(&v[j..j + h.len()]).map(|(a, b)| a * b).sum()
}

#[inline]
pub(crate) fn add_column(v: &mut [f64], h: &[f64], j: usize, a: f64) {
    for (vi, hk) in v[j..j + h.len()].iter_mut().zip(h) {
        *vi += a * hk;
    }
}

pub(crate) fn autocorrelation(h: &[f64]) -> Vec<f64> {
    (0..h.len())
        .map(|k| h.iter().zip(&h[k..]).map(|(a, b)| a * b).sum())
        .collect()
}

/// `X' v` where `X` is the `n x (p+1)` Toeplitz matrix built from `x`, so
/// that `X h = H x`.
pub fn signal_correlate(x: &[f64], taps: usize, v: &[f64]) -> Result<Vec<f64>> {
    check_len("observation", x.len() + taps - 1, v.len())?;
    let mut out = vec![0.0; taps];
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            for (k, o) in out.iter_mut().enumerate() {
                *o += xj * v[j + k];
            }
        }
    }
    Ok(out)
}

/// `X' X` for the Toeplitz matrix built from `x`; entry `(k, l)` is the
/// autocorrelation of `x` at lag `|k - l|`.
pub fn signal_gram(x: &[f64], taps: usize) -> Vec<f64> {
    let support: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
    let mut lags = vec![0.0; taps];
    for (a, &j) in support.iter().enumerate() {
        for &l in &support[a..] {
            let lag = l - j;
            if lag >= taps {
                break;
            }
            lags[lag] += x[j] * x[l];
        }
    }
    let mut gram = vec![0.0; taps * taps];
    for k in 0..taps {
        for l in 0..taps {
            gram[k * taps + l] = lags[k.abs_diff(l)];
        }
    }
    gram
}

/// The 21-tap impulse response used throughout the benchmark experiments:
/// `h(i) = cos((i - 10) pi / 4) exp(-|0.225 i - 2|^1.5)`.
pub fn reference_ir(p: usize) -> Result<Vec<f64>> {
    if p != 20 {
        return Err(Error::Dims(format!(
            "the benchmark impulse response has order 20, requested {p}"
        )));
    }
    Ok((0..=p)
        .map(|i| {
            let i = i as f64;
            ((i - 10.0) * std::f64::consts::FRAC_PI_4).cos()
                * (-(0.225 * i - 2.0).abs().powf(1.5)).exp()
        })
        .collect())
}

/// Log of the unnormalized joint posterior density of `state` given `z`.
/// Constant normalizations of the hyperpriors are dropped; inactive
/// amplitudes contribute nothing (they are pinned at zero).
pub fn log_joint_posterior(
    state: &BgState,
    z: &[f64],
    dims: ModelDims,
    priors: &Hyperpriors,
) -> Result<f64> {
    state.validate(dims)?;
    priors.validate()?;
    check_len("observation", dims.n, z.len())?;
    let op = ConvOperator::new(dims, state.h.clone())?;
    let resid = op.residual(z, &state.x)?;
    let two_pi = 2.0 * std::f64::consts::PI;

    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let likelihood = -0.5 * dims.n as f64 * (two_pi * state.sigma_eps2).ln()
        - rss / (2.0 * state.sigma_eps2);

    let active = state.spike_count();
    let amp_energy: f64 = state.x.iter().map(|x| x * x).sum();
    let amplitudes = -0.5 * active as f64 * (two_pi * state.sigma_x2).ln()
        - amp_energy / (2.0 * state.sigma_x2);

    let h_energy: f64 = state.h.iter().map(|v| v * v).sum();
    let ir = -0.5 * dims.taps() as f64 * (two_pi * state.sigma_h2).ln()
        - h_energy / (2.0 * state.sigma_h2);

    let bernoulli = active as f64 * state.lambda.ln()
        + (dims.m - active) as f64 * (1.0 - state.lambda).ln();

    let ig_kernel = |v: f64, shape: f64, scale: f64| -(shape + 1.0) * v.ln() - scale / v;
    let hyper = ig_kernel(state.sigma_eps2, priors.ig_shape_eps, priors.ig_scale_eps)
        + ig_kernel(state.sigma_h2, priors.ig_shape_h, priors.ig_scale_h)
        + (priors.beta_a - 1.0) * state.lambda.ln()
        + (priors.beta_b - 1.0) * (1.0 - state.lambda).ln();

    Ok(likelihood + amplitudes + ir + bernoulli + hyper)
}

/// A simulated observation together with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub z: Vec<f64>,
    pub z_clean: Vec<f64>,
    pub q_true: Vec<bool>,
    pub x_true: Vec<f64>,
    pub h_true: Vec<f64>,
}

/// Draws a BG spike train with unit amplitude variance, convolves it with
/// `h` and adds white Gaussian noise. Deterministic given `seed`.
pub fn generate_synthetic(
    dims: ModelDims,
    lambda: f64,
    sigma_eps2: f64,
    h: &[f64],
    seed: u64,
) -> Result<SyntheticData> {
    generate_scaled(dims, lambda, sigma_eps2, h, 1.0, seed)
}

/// Like [`generate_synthetic`] with amplitudes drawn from `N(0, amplitude_std^2)`.
/// The random stream is identical for every `amplitude_std`, so the same
/// seed yields the same support and proportional amplitudes.
pub fn generate_scaled(
    dims: ModelDims,
    lambda: f64,
    sigma_eps2: f64,
    h: &[f64],
    amplitude_std: f64,
    seed: u64,
) -> Result<SyntheticData> {
    dims.validate()?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!("lambda = {lambda} not in (0, 1)")));
    }
    if !(sigma_eps2 >= 0.0) {
        return Err(Error::Domain(format!("sigma_eps2 = {sigma_eps2} is negative")));
    }
    let op = ConvOperator::new(dims, h.to_vec())?;
    let mut rng = ChainRng::seed_from_u64(seed);
    let mut q_true = vec![false; dims.m];
    let mut x_true = vec![0.0; dims.m];
    for (q, x) in q_true.iter_mut().zip(x_true.iter_mut()) {
        *q = rng.random::<f64>() < lambda;
        if *q {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x = amplitude_std * g;
        }
    }
    let z_clean = op.convolve(&x_true)?;
    let noise_std = sigma_eps2.sqrt();
    let z = z_clean
        .iter()
        .map(|&c| {
            let g: f64 = StandardNormal.sample(&mut rng);
            c + noise_std * g
        })
        .collect();
    Ok(SyntheticData {
        z,
        z_clean,
        q_true,
        x_true,
        h_true: h.to_vec(),
    })
}

/// Convolves a given spike train with `h` and adds white Gaussian noise.
/// The noise stream is `n` standard normal draws from `seed`, in order.
pub fn generate_from_train(
    dims: ModelDims,
    x_true: &[f64],
    sigma_eps2: f64,
    h: &[f64],
    seed: u64,
) -> Result<SyntheticData> {
    dims.validate()?;
    check_len("spike train", dims.m, x_true.len())?;
    if !(sigma_eps2 >= 0.0) {
        return Err(Error::Domain(format!("sigma_eps2 = {sigma_eps2} is negative")));
    }
    let op = ConvOperator::new(dims, h.to_vec())?;
    let z_clean = op.convolve(x_true)?;
    let mut rng = ChainRng::seed_from_u64(seed);
    let noise_std = sigma_eps2.sqrt();
    let z = z_clean
        .iter()
        .map(|&c| {
            let g: f64 = StandardNormal.sample(&mut rng);
            c + noise_std * g
        })
        .collect();
    Ok(SyntheticData {
        z,
        z_clean,
        q_true: x_true.iter().map(|&v| v != 0.0).collect(),
        x_true: x_true.to_vec(),
        h_true: h.to_vec(),
    })
}

/// Signal-to-noise ratio in decibels, relative to the noiseless signal power.
pub fn snr_db(z_clean: &[f64], sigma_eps2: f64) -> Result<f64> {
    if sigma_eps2 <= 0.0 {
        return Err(Error::Domain("SNR is infinite for zero noise variance".into()));
    }
    if z_clean.is_empty() {
        return Err(Error::Dims("empty signal".into()));
    }
    let power = z_clean.iter().map(|v| v * v).sum::<f64>() / z_clean.len() as f64;
    Ok(10.0 * (power / sigma_eps2).log10())
}

pub(crate) fn sample_inverse_gamma(shape: f64, scale: f64, rng: &mut ChainRng) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}

pub(crate) fn sample_beta(a: f64, b: f64, rng: &mut ChainRng) -> f64 {
    // Gamma ratio rather than rand_distr::Beta so that extreme (a, b) stay
    // inside the open unit interval after clamping.
    let ga = Gamma::new(a, 1.0).expect("positive beta parameter").sample(rng);
    let gb = Gamma::new(b, 1.0).expect("positive beta parameter").sample(rng);
    (ga / (ga + gb)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
