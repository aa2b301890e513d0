//! Steps 2 to 5 shared by every sampler: impulse response, time-shift and
//! scale moves, and the conjugate hyperparameter draws.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gig::sample_gig;
use super::ChainStats;
use crate::error::{check_len, Result};
use crate::linalg::{cholesky, CholFactor};
use crate::model::{sample_beta, sample_inverse_gamma, signal_correlate, signal_gram, BgState, ConvOperator, Hyperpriors, ModelDims};
use crate::ChainRng;

/// Gaussian conditional of `h` given a spike train: precision
/// `S = X'X / sigma_eps2 + I / sigma_h2`, factored as `U'U`, and
/// `a = U'^{-1} X'z`.
#[derive(Debug, Clone)]
pub struct IrConditional {
    pub factor: CholFactor,
    pub projected: Vec<f64>,
    sigma_eps2: f64,
}

impl IrConditional {
    pub fn new(x: &[f64], z: &[f64], taps: usize, sigma_eps2: f64, sigma_h2: f64) -> Result<Self> {
        let mut s = signal_gram(x, taps);
        for v in &mut s {
            *v /= sigma_eps2;
        }
        for k in 0..taps {
            s[k * taps + k] += 1.0 / sigma_h2;
        }
        let factor = cholesky(taps, &s)?;
        let xtz = signal_correlate(x, taps, z)?;
        let projected = factor.solve_lower_transpose(&xtz)?;
        Ok(Self {
            factor,
            projected,
            sigma_eps2,
        })
    }

    /// Twice the log marginal likelihood of `z` with `h` integrated out, up
    /// to terms that do not depend on the spike train.
    pub fn log_evidence2(&self) -> f64 {
        let quad: f64 = self.projected.iter().map(|v| v * v).sum();
        quad / (self.sigma_eps2 * self.sigma_eps2) - 2.0 * self.factor.log_det()
    }

    /// Posterior mean `U^{-1} U'^{-1} X'z / sigma_eps2`.
    pub fn mean(&self) -> Result<Vec<f64>> {
        let rhs: Vec<f64> = self.projected.iter().map(|v| v / self.sigma_eps2).collect();
        self.factor.solve_upper(&rhs)
    }

    pub fn draw(&self, rng: &mut ChainRng) -> Result<Vec<f64>> {
        let rhs: Vec<f64> = self
            .projected
            .iter()
            .map(|v| {
                let g: f64 = StandardNormal.sample(rng);
                v / self.sigma_eps2 + g
            })
            .collect();
        self.factor.solve_upper(&rhs)
    }
}

/// Draws `h ~ N(m, R)`, `R^{-1} = X'X / sigma_eps2 + I / sigma_h2`, and
/// stores it in the state.
pub fn sample_h(state: &mut BgState, z: &[f64], rng: &mut ChainRng) -> Result<()> {
    let taps = state.h.len();
    check_len("observation", state.x.len() + taps - 1, z.len())?;
    let cond = IrConditional::new(&state.x, z, taps, state.sigma_eps2, state.sigma_h2)?;
    state.h = cond.draw(rng)?;
    Ok(())
}

/// Circular shift by one position: `+1` moves every entry to the next
/// index, `-1` to the previous one.
pub fn circshift<T: Copy>(v: &[T], shift: i8) -> Vec<T> {
    let m = v.len();
    match shift {
        1 => (0..m).map(|j| v[(j + m - 1) % m]).collect(),
        -1 => (0..m).map(|j| v[(j + 1) % m]).collect(),
        _ => v.to_vec(),
    }
}

/// Outcome of the time-shift proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftOutcome {
    Identity,
    Accepted(i8),
    Rejected(i8),
}

/// Metropolis-Hastings log acceptance ratio (times two) for replacing the
/// spike train `x` by `x_new`, with `h` integrated out.
pub fn shift_log_ratio(
    x: &[f64],
    x_new: &[f64],
    z: &[f64],
    taps: usize,
    sigma_eps2: f64,
    sigma_h2: f64,
) -> Result<f64> {
    let cur = IrConditional::new(x, z, taps, sigma_eps2, sigma_h2)?;
    let prop = IrConditional::new(x_new, z, taps, sigma_eps2, sigma_h2)?;
    Ok(prop.log_evidence2() - cur.log_evidence2())
}

/// Time-shift move on `(q, x)` with `h` redrawn from the selected branch,
/// followed by the scale move `x <- s x`, `h <- h / s` with
/// `s^2 ~ GIG((L - P - 1) / 2, |x|^2 / sigma_x2, |h|^2 / sigma_h2)`.
pub fn timeshift_scale_move(
    state: &mut BgState,
    z: &[f64],
    eta: f64,
    rng: &mut ChainRng,
    stats: &mut ChainStats,
) -> Result<ShiftOutcome> {
    let taps = state.h.len();
    let outcome = shift_move(state, z, eta, rng, stats)?;
    scale_move(state, taps, rng, stats)?;
    Ok(outcome)
}

pub(crate) fn shift_move(
    state: &mut BgState,
    z: &[f64],
    eta: f64,
    rng: &mut ChainRng,
    stats: &mut ChainStats,
) -> Result<ShiftOutcome> {
    let taps = state.h.len();
    let u: f64 = rng.random();
    let shift: i8 = if u < eta {
        1
    } else if u < 2.0 * eta {
        -1
    } else {
        0
    };
    let cur = IrConditional::new(&state.x, z, taps, state.sigma_eps2, state.sigma_h2)?;
    if shift == 0 {
        state.h = cur.draw(rng)?;
        return Ok(ShiftOutcome::Identity);
    }
    stats.shift_proposals += 1;
    let x_new = circshift(&state.x, shift);
    let prop = IrConditional::new(&x_new, z, taps, state.sigma_eps2, state.sigma_h2)?;
    let rho = prop.log_evidence2() - cur.log_evidence2();
    let r: f64 = rng.random();
    if 2.0 * r.ln() < rho {
        stats.shift_accepts += 1;
        state.q = circshift(&state.q, shift);
        state.x = x_new;
        state.h = prop.draw(rng)?;
        Ok(ShiftOutcome::Accepted(shift))
    } else {
        state.h = cur.draw(rng)?;
        Ok(ShiftOutcome::Rejected(shift))
    }
}

pub(crate) fn scale_move(
    state: &mut BgState,
    taps: usize,
    rng: &mut ChainRng,
    stats: &mut ChainStats,
) -> Result<()> {
    let alpha = state.x.iter().map(|v| v * v).sum::<f64>() / state.sigma_x2;
    let beta = state.h.iter().map(|v| v * v).sum::<f64>() / state.sigma_h2;
    if !(alpha > 0.0 && beta > 0.0) {
        stats.scale_skips += 1;
        return Ok(());
    }
    let lambda = (state.spike_count() as f64 - taps as f64) / 2.0;
    match sample_gig(lambda, alpha, beta, rng) {
        Ok(s2) => {
            let s = s2.sqrt();
            state.x.iter_mut().for_each(|v| *v *= s);
            state.h.iter_mut().for_each(|v| *v /= s);
            Ok(())
        }
        Err(crate::Error::GigRejections(_)) => {
            stats.gig_failures += 1;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// `sigma_eps2 ~ IG(a + N/2, b + |z - Hx|^2 / 2)`.
pub fn sample_sigma_eps(
    state: &BgState,
    z: &[f64],
    dims: ModelDims,
    priors: &Hyperpriors,
    rng: &mut ChainRng,
) -> Result<f64> {
    let op = ConvOperator::new(dims, state.h.clone())?;
    let rss: f64 = op.residual(z, &state.x)?.iter().map(|r| r * r).sum();
    Ok(sample_inverse_gamma(
        priors.ig_shape_eps + dims.n as f64 / 2.0,
        priors.ig_scale_eps + rss / 2.0,
        rng,
    ))
}

/// `lambda ~ Be(a + L, b + M - L)`.
pub fn sample_lambda(state: &BgState, priors: &Hyperpriors, rng: &mut ChainRng) -> f64 {
    let l = state.spike_count() as f64;
    let m = state.q.len() as f64;
    sample_beta(priors.beta_a + l, priors.beta_b + m - l, rng)
}

/// `sigma_h2 ~ IG(a + (P+1)/2, b + |h|^2 / 2)`, the exact conjugate update
/// for a `P + 1`-tap impulse response.
pub fn sample_sigma_h(state: &BgState, priors: &Hyperpriors, rng: &mut ChainRng) -> f64 {
    let energy: f64 = state.h.iter().map(|v| v * v).sum();
    sample_inverse_gamma(
        priors.ig_shape_h + state.h.len() as f64 / 2.0,
        priors.ig_scale_h + energy / 2.0,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_ir;
    use rand::SeedableRng;

    fn state(x: Vec<f64>, h: Vec<f64>) -> BgState {
        BgState {
            q: x.iter().map(|&v| v != 0.0).collect(),
            x,
            h,
            lambda: 0.2,
            sigma_eps2: 0.5,
            sigma_h2: 1.5,
            sigma_x2: 1.0,
        }
    }

    #[test]
    fn circshift_directions() {
        let v = [1, 2, 3, 4];
        assert_eq!(circshift(&v, 1), vec![4, 1, 2, 3]);
        assert_eq!(circshift(&v, -1), vec![2, 3, 4, 1]);
        assert_eq!(circshift(&v, 0), v.to_vec());
    }

    #[test]
    fn zero_spike_train_draws_from_prior() {
        let mut s = state(vec![0.0; 5], vec![0.0; 3]);
        let z = vec![0.3, -0.2, 0.1, 0.0, 0.5, 0.2, -0.4];
        let mut rng = ChainRng::seed_from_u64(1);
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            sample_h(&mut s, &z, &mut rng).unwrap();
            for k in 0..3 {
                sum[k] += s.h[k];
                sq[k] += s.h[k] * s.h[k];
            }
        }
        for k in 0..3 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let se_mean = (1.5f64 / n as f64).sqrt();
            // Sample variance of a Gaussian has standard error sigma^2 sqrt(2/n).
            let se_var = 1.5 * (2.0 / n as f64).sqrt();
            assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
            assert!((var - 1.5).abs() < 3.0 * se_var, "var {var}");
        }
    }

    #[test]
    fn low_noise_mean_approaches_least_squares() {
        // Well-conditioned X from a dense spike train.
        let x = vec![1.0, -0.5, 0.8, 0.3, -1.1, 0.6];
        let h_true = vec![0.9, -0.4, 0.2];
        let dims = ModelDims::new(6, 2).unwrap();
        let op = ConvOperator::new(dims, h_true.clone()).unwrap();
        let mut z = op.convolve(&x).unwrap();
        // Perturb so the least-squares solution is not exactly h_true.
        for (k, v) in z.iter_mut().enumerate() {
            *v += 0.01 * ((k as f64) * 1.3).sin();
        }
        // Normal equations X'X h = X'z solved independently.
        let g = signal_gram(&x, 3);
        let xtz = signal_correlate(&x, 3, &z).unwrap();
        let ls = solve3(&g, &xtz);
        let cond = IrConditional::new(&x, &z, 3, 1e-10, 1.0).unwrap();
        let mean = cond.mean().unwrap();
        for k in 0..3 {
            assert!((mean[k] - ls[k]).abs() < 1e-6, "{mean:?} vs {ls:?}");
        }
    }

    fn solve3(a: &[f64], b: &[f64]) -> Vec<f64> {
        let det = |m: &[f64]| {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        };
        let d = det(a);
        (0..3)
            .map(|c| {
                let mut m = a.to_vec();
                for r in 0..3 {
                    m[r * 3 + c] = b[r];
                }
                det(&m) / d
            })
            .collect()
    }

    #[test]
    fn ir_draw_covariance_matches_posterior() {
        let x = vec![0.7, 0.0, -1.2, 0.4];
        let z = vec![0.5, 0.1, -0.9, 0.3, 0.2, -0.1];
        let (se2, sh2) = (0.3, 2.0);
        let cond = IrConditional::new(&x, &z, 3, se2, sh2).unwrap();
        let mut s = signal_gram(&x, 3);
        for v in &mut s {
            *v /= se2;
        }
        for k in 0..3 {
            s[k * 4] += 1.0 / sh2;
        }
        let cov = crate::linalg::spd_inverse(3, &s).unwrap();
        let mut rng = ChainRng::seed_from_u64(7);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| cond.draw(&mut rng).unwrap()).collect();
        let mean: Vec<f64> = (0..3)
            .map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / n as f64)
            .collect();
        for a in 0..3 {
            for b in 0..3 {
                let c = draws
                    .iter()
                    .map(|d| (d[a] - mean[a]) * (d[b] - mean[b]))
                    .sum::<f64>()
                    / (n - 1) as f64;
                let scale = (cov[a * 4] * cov[b * 4]).sqrt();
                assert!(
                    (c - cov[a * 3 + b]).abs() < 0.05 * scale,
                    "cov[{a},{b}] {c} vs {}",
                    cov[a * 3 + b]
                );
            }
        }
    }

    #[test]
    fn identity_proposal_reduces_to_ir_draw() {
        let x = vec![0.0, 1.0, 0.0, -0.5, 0.0];
        let z = vec![0.1, 0.9, 0.4, -0.5, -0.2, 0.1, 0.0];
        let s0 = state(x, vec![1.0, 0.3, -0.1]);
        // eta -> 0 forces the identity branch; the draw then matches
        // sample_h with the same random stream after the selection uniform.
        let mut a = s0.clone();
        let mut rng_a = ChainRng::seed_from_u64(3);
        let mut stats = ChainStats::default();
        let out = shift_move(&mut a, &z, 1e-300, &mut rng_a, &mut stats).unwrap();
        assert_eq!(out, ShiftOutcome::Identity);
        let mut b = s0.clone();
        let mut rng_b = ChainRng::seed_from_u64(3);
        let _: f64 = rng_b.random();
        sample_h(&mut b, &z, &mut rng_b).unwrap();
        assert_eq!(a, b);
        assert_eq!(shift_log_ratio(&s0.x, &s0.x, &z, 3, 0.5, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn scale_move_preserves_convolution() {
        let dims = ModelDims::new(30, 20).unwrap();
        let mut x = vec![0.0; 30];
        x[10] = 0.8;
        x[14] = -0.3;
        let mut s = state(x, reference_ir(20).unwrap());
        let op = ConvOperator::new(dims, s.h.clone()).unwrap();
        let before = op.convolve(&s.x).unwrap();
        let mut rng = ChainRng::seed_from_u64(11);
        let mut stats = ChainStats::default();
        scale_move(&mut s, 21, &mut rng, &mut stats).unwrap();
        assert_ne!(s.x[10], 0.8);
        let op = ConvOperator::new(dims, s.h.clone()).unwrap();
        let after = op.convolve(&s.x).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scale_move_skipped_on_empty_train() {
        let mut s = state(vec![0.0; 4], vec![1.0, 0.0]);
        let mut rng = ChainRng::seed_from_u64(0);
        let mut stats = ChainStats::default();
        scale_move(&mut s, 2, &mut rng, &mut stats).unwrap();
        assert_eq!(stats.scale_skips, 1);
        assert_eq!(s.h, vec![1.0, 0.0]);
    }

    /// Long-run occupancy of the shift move restricted to the orbit of a
    /// single spike on `M = 3` sites matches the marginal evidence weights.
    #[test]
    fn shift_move_occupancy_balances() {
        let taps = 2;
        let z = vec![0.2, 1.1, 0.6, -0.1];
        let (se2, sh2) = (0.4, 1.0);
        let orbit: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                let mut x = vec![0.0; 3];
                x[j] = 0.9;
                x
            })
            .collect();
        let log_w: Vec<f64> = orbit
            .iter()
            .map(|x| 0.5 * IrConditional::new(x, &z, taps, se2, sh2).unwrap().log_evidence2())
            .collect();
        let max = log_w.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();

        let mut s = state(orbit[0].clone(), vec![1.0, 0.0]);
        s.sigma_eps2 = se2;
        s.sigma_h2 = sh2;
        let mut rng = ChainRng::seed_from_u64(5);
        let mut stats = ChainStats::default();
        let mut counts = [0usize; 3];
        let thin = 10;
        let kept = 20_000;
        for _ in 0..kept {
            for _ in 0..thin {
                shift_move(&mut s, &z, 0.25, &mut rng, &mut stats).unwrap();
            }
            counts[s.q.iter().position(|&q| q).unwrap()] += 1;
        }
        let chi2: f64 = (0..3)
            .map(|k| {
                let e = kept as f64 * w[k] / total;
                (counts[k] as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square with 2 degrees of freedom: P(X > 9.21) = 0.01.
        assert!(chi2 < 9.21, "chi2 {chi2}, counts {counts:?}, weights {w:?}");
    }

    #[test]
    fn conjugate_hyperparameter_draws() {
        let dims = ModelDims::new(10, 2).unwrap();
        let mut rng = ChainRng::seed_from_u64(9);
        let priors = Hyperpriors::default();
        let n = 100_000;

        // Zero residual: IG(N/2 + 1, 1), mean 1 / (N/2).
        let mut s = state(vec![0.0; 10], vec![0.5, 0.2, 0.1]);
        s.x[3] = 1.0;
        s.q[3] = true;
        let op = ConvOperator::new(dims, s.h.clone()).unwrap();
        let z = op.convolve(&s.x).unwrap();
        let d: Vec<f64> = (0..n)
            .map(|_| sample_sigma_eps(&s, &z, dims, &priors, &mut rng).unwrap())
            .collect();
        check_mean(&d, 1.0 / (12.0 / 2.0));

        // No spikes: Be(1, 1 + M), mean 1 / (M + 2).
        let s0 = state(vec![0.0; 10], vec![0.5, 0.2, 0.1]);
        let d: Vec<f64> = (0..n).map(|_| sample_lambda(&s0, &priors, &mut rng)).collect();
        check_mean(&d, 1.0 / 12.0);

        // h = 0: IG((P+1)/2 + 1, 1), mean 1 / ((P+1)/2).
        let sh = state(vec![0.0; 10], vec![0.0; 3]);
        let d: Vec<f64> = (0..n).map(|_| sample_sigma_h(&sh, &priors, &mut rng)).collect();
        check_mean(&d, 1.0 / 1.5);
    }

    fn check_mean(d: &[f64], expected: f64) {
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected}");
    }
}
