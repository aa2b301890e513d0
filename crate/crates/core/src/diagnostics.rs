//! Multi-chain convergence diagnostics and posterior estimates.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::cholesky;
use crate::model::BgState;
use crate::samplers::{conditional_mean_x, ChainStats, Sampler};
use crate::ChainRng;

/// Threshold below which a chain ensemble is declared converged.
pub const MPSRF_THRESHOLD: f64 = 1.2;

/// Relative ridge added to the within-chain covariance when it is singular
/// or badly conditioned.
pub const RIDGE: f64 = 1e-10;

/// `m` chains of `n` sample vectors of dimension `dim`, stored row-major
/// per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainEnsemble {
    dim: usize,
    n: usize,
    chains: Vec<Vec<f64>>,
}

impl ChainEnsemble {
    pub fn new(dim: usize, chains: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dims("sample dimension must be positive".into()));
        }
        let n = chains.first().map_or(0, |c| c.len() / dim);
        for c in &chains {
            check_len("chain samples", n * dim, c.len())?;
        }
        Ok(Self { dim, n, chains })
    }

    /// Ensemble over `q` cast to reals, one row per iteration.
    pub fn from_q_rows(chains: &[&[Vec<bool>]]) -> Result<Self> {
        let dim = chains
            .first()
            .and_then(|c| c.first())
            .map(|r| r.len())
            .ok_or_else(|| Error::Dims("empty ensemble".into()))?;
        let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
        let data = chains
            .iter()
            .map(|c| {
                c[..n]
                    .iter()
                    .flat_map(|row| row.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                    .collect()
            })
            .collect();
        Self::new(dim, data)
    }

    pub fn chains(&self) -> usize {
        self.chains.len()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, chain: usize, t: usize) -> &[f64] {
        &self.chains[chain][t * self.dim..(t + 1) * self.dim]
    }

    /// MPSRF over the samples `start..end` of every chain.
    pub fn mpsrf_window(&self, start: usize, end: usize) -> Result<f64> {
        let m = self.chains.len();
        if m < 2 {
            return Err(Error::Diagnostic(format!("{m} chain(s); at least 2 required")));
        }
        if end > self.n || end < start + 2 {
            return Err(Error::Diagnostic(format!(
                "window {start}..{end} needs at least 2 of {} samples",
                self.n
            )));
        }
        let n = end - start;
        let d = self.dim;
        let mut means = vec![vec![0.0; d]; m];
        // Within-chain scatter sum over chains, accumulated from the nonzero
        // entries of each sample so that sparse binary traces stay cheap.
        let mut scatter = vec![0.0; d * d];
        let mut nz = Vec::with_capacity(d);
        for (j, mean) in means.iter_mut().enumerate() {
            for t in start..end {
                let row = self.sample(j, t);
                nz.clear();
                nz.extend((0..d).filter(|&a| row[a] != 0.0));
                for &a in &nz {
                    mean[a] += row[a];
                    let ra = row[a];
                    for &b in &nz {
                        if b >= a {
                            scatter[a * d + b] += ra * row[b];
                        }
                    }
                }
            }
            for v in mean.iter_mut() {
                *v /= n as f64;
            }
            for a in 0..d {
                if mean[a] == 0.0 {
                    continue;
                }
                for b in a..d {
                    scatter[a * d + b] -= n as f64 * mean[a] * mean[b];
                }
            }
        }
        let grand: Vec<f64> = (0..d)
            .map(|a| means.iter().map(|mu| mu[a]).sum::<f64>() / m as f64)
            .collect();

        // Coordinates constant across every chain carry no information.
        let keep: Vec<usize> = (0..d)
            .filter(|&a| scatter[a * d + a] > 0.0 || means.iter().any(|mu| mu[a] != grand[a]))
            .collect();
        if keep.is_empty() {
            return Err(Error::Diagnostic("every coordinate is constant across chains".into()));
        }
        let k = keep.len();
        let norm = (m * (n - 1)) as f64;
        let mut w = vec![0.0; k * k];
        for (r, &a) in keep.iter().enumerate() {
            for (c, &b) in keep.iter().enumerate().skip(r) {
                let mut v = scatter[a * d + b] / norm;
                if a == b {
                    v = v.max(0.0);
                }
                w[r * k + c] = v;
                w[c * k + r] = v;
            }
        }
        let factor = match cholesky(k, &w).ok().filter(|f| well_conditioned(f.diagonal())) {
            Some(f) => f,
            None => {
                let ridge = RIDGE * (0..k).map(|r| w[r * k + r]).sum::<f64>() / k as f64;
                for r in 0..k {
                    w[r * k + r] += ridge;
                }
                match cholesky(k, &w) {
                    Ok(f) => f,
                    // Chains frozen at different values: no within-chain
                    // spread at all.
                    Err(_) => return Ok(f64::INFINITY),
                }
            }
        };
        // lambda_max(W^{-1} B B') / (m - 1) = lambda_max(C'C) / (m - 1) with
        // C = U'^{-1} B.
        let mut c = DMatrix::<f64>::zeros(k, m);
        for (j, mu) in means.iter().enumerate() {
            let col: Vec<f64> = keep.iter().map(|&a| mu[a] - grand[a]).collect();
            let s = factor.solve_lower_transpose(&col)?;
            for r in 0..k {
                c[(r, j)] = s[r];
            }
        }
        let gram = c.transpose() * &c / (m - 1) as f64;
        let lambda = SymmetricEigen::new(gram)
            .eigenvalues
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        let nf = n as f64;
        Ok((nf - 1.0) / nf + (m as f64 + 1.0) / m as f64 * lambda)
    }
}

fn well_conditioned(diag: Vec<f64>) -> bool {
    let max = diag.iter().cloned().fold(0.0f64, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    min > 0.0 && (max / min).powi(2) < 1e12
}

/// Multivariate potential scale reduction factor over all samples.
pub fn mpsrf(ensemble: &ChainEnsemble) -> Result<f64> {
    ensemble.mpsrf_window(0, ensemble.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpsrfPoint {
    pub iteration: usize,
    /// NaN where the statistic is undefined.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpsrfTrace {
    pub batch: usize,
    pub points: Vec<MpsrfPoint>,
}

impl MpsrfTrace {
    /// First iteration at which the statistic is below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.value < threshold)
            .map(|p| p.iteration)
    }
}

/// Point `k` uses samples `(kb/2, kb]` of each chain, the first half of
/// every prefix being discarded as burn-in.
pub fn mpsrf_trace(ensemble: &ChainEnsemble, batch: usize) -> Result<MpsrfTrace> {
    if batch == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    if ensemble.chains() < 2 {
        return Err(Error::Diagnostic(format!(
            "{} chain(s); at least 2 required",
            ensemble.chains()
        )));
    }
    let mut points = Vec::new();
    let mut kb = batch;
    while kb <= ensemble.len() {
        let value = match ensemble.mpsrf_window(kb / 2, kb) {
            Ok(v) => v,
            Err(Error::Diagnostic(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        points.push(MpsrfPoint { iteration: kb, value });
        kb += batch;
    }
    Ok(MpsrfTrace { batch, points })
}

/// Recorded output of one chain; row `t` holds the state after iteration
/// `t + 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub seed: u64,
    pub q: Vec<Vec<bool>>,
    pub lambda: Vec<f64>,
    pub sigma_eps2: Vec<f64>,
    pub sigma_h2: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub iter_seconds: Vec<f64>,
    pub stats: ChainStats,
    pub error: Option<String>,
}

impl ChainRecord {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    fn push(&mut self, s: &BgState, seconds: f64) {
        self.q.push(s.q.clone());
        self.lambda.push(s.lambda);
        self.sigma_eps2.push(s.sigma_eps2);
        self.sigma_h2.push(s.sigma_h2);
        self.h.push(s.h.clone());
        self.iter_seconds.push(seconds);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Starting state; drawn from the default initialization when absent.
    pub init: Option<BgState>,
}

/// Runs one chain. A sampler error stops the chain and is kept in
/// `error` alongside the samples drawn so far.
pub fn run_chain(sampler: &Sampler, cfg: &ChainConfig) -> ChainRecord {
    let mut rng = ChainRng::seed_from_u64(cfg.seed);
    let mut state = match &cfg.init {
        Some(s) => s.clone(),
        None => BgState::initial(sampler.dims(), sampler.priors(), &mut rng),
    };
    let mut rec = ChainRecord {
        seed: cfg.seed,
        ..Default::default()
    };
    for _ in 0..cfg.iterations {
        let t0 = Instant::now();
        if let Err(e) = sampler.iterate(&mut state, &mut rng, &mut rec.stats) {
            rec.error = Some(e.to_string());
            break;
        }
        let dt = t0.elapsed().as_secs_f64();
        rec.push(&state, dt);
    }
    rec
}

/// Smallest `k` with `q^(k) = q_true` (`k = 0` is the starting state).
pub fn first_visit(
    sampler: &Sampler,
    init: Option<&BgState>,
    q_true: &[bool],
    max_iter: usize,
    seed: u64,
) -> Result<Option<usize>> {
    check_len("true configuration", sampler.dims().m, q_true.len())?;
    let mut rng = ChainRng::seed_from_u64(seed);
    let mut state = match init {
        Some(s) => s.clone(),
        None => BgState::initial(sampler.dims(), sampler.priors(), &mut rng),
    };
    if state.q == q_true {
        return Ok(Some(0));
    }
    let mut stats = ChainStats::default();
    for k in 1..=max_iter {
        sampler.iterate(&mut state, &mut rng, &mut stats)?;
        if state.q == q_true {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub q: Vec<bool>,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub lambda: f64,
    pub sigma_eps2: f64,
    pub sigma_h2: f64,
    pub samples: usize,
}

/// Per-site majority on `q` (ties go to 0), sample means of the continuous
/// parameters over iterations `burn_in..`, pooled across `chains`, then `x`
/// as the conditional posterior mean given those.
pub fn estimate(chains: &[&ChainRecord], burn_in: usize, z: &[f64], sigma_x2: f64) -> Result<Estimate> {
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if chains.is_empty() || burn_in >= len {
        return Err(Error::Domain(format!(
            "burn-in {burn_in} leaves no samples out of {len}"
        )));
    }
    let m = chains[0].q[0].len();
    let taps = chains[0].h[0].len();
    let mut counts = vec![0usize; m];
    let mut h = vec![0.0; taps];
    let (mut lambda, mut se2, mut sh2) = (0.0, 0.0, 0.0);
    let mut total = 0usize;
    for c in chains {
        for t in burn_in..len {
            for (n, &b) in counts.iter_mut().zip(&c.q[t]) {
                *n += b as usize;
            }
            for (a, v) in h.iter_mut().zip(&c.h[t]) {
                *a += v;
            }
            lambda += c.lambda[t];
            se2 += c.sigma_eps2[t];
            sh2 += c.sigma_h2[t];
            total += 1;
        }
    }
    let tf = total as f64;
    let q: Vec<bool> = counts.iter().map(|&n| 2 * n > total).collect();
    h.iter_mut().for_each(|v| *v /= tf);
    let state = BgState {
        x: vec![0.0; m],
        q,
        h,
        lambda: lambda / tf,
        sigma_eps2: se2 / tf,
        sigma_h2: sh2 / tf,
        sigma_x2,
    };
    let x = conditional_mean_x(&state, z)?;
    Ok(Estimate {
        q: state.q,
        x,
        h: state.h,
        lambda: state.lambda,
        sigma_eps2: state.sigma_eps2,
        sigma_h2: state.sigma_h2,
        samples: total,
    })
}

/// Median of `values[skip..]`; `None` when nothing is left.
pub fn median_after(values: &[f64], skip: usize) -> Option<f64> {
    let mut v: Vec<f64> = values.get(skip..)?.to_vec();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    Some(if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    })
}

/// Least-squares polynomial `y ≈ Σ coeffs[k] x^k` with its coefficient of
/// determination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub coeffs: Vec<f64>,
    pub r_squared: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

pub fn poly_fit(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    check_len("fit ordinates", xs.len(), ys.len())?;
    if xs.len() <= degree {
        return Err(Error::Diagnostic(format!(
            "degree-{degree} fit needs more than {degree} points, got {}",
            xs.len()
        )));
    }
    // Abscissae are rescaled to [-1, 1]-ish before forming the Vandermonde
    // matrix; coefficients are mapped back afterwards.
    let scale = xs.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
    let a = DMatrix::from_fn(xs.len(), degree + 1, |i, k| (xs[i] / scale).powi(k as i32));
    let b = DMatrix::from_column_slice(ys.len(), 1, ys);
    let sol = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Diagnostic(format!("polynomial fit failed: {e}")))?;
    let coeffs: Vec<f64> = (0..=degree).map(|k| sol[k] / scale.powi(k as i32)).collect();
    let fitted = &a * &sol;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_res: f64 = ys.iter().zip(fitted.iter()).map(|(y, f)| (y - f).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(PolyFit { coeffs, r_squared })
}
