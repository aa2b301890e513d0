//! Site-by-site sampling of `(q_i, x_i)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{clamp_rate, log_sigmoid_prob};
use crate::error::{check_len, Result};
use crate::model::{add_column, column_dot, BgState};
use crate::ChainRng;

/// Conditional law of one site given the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteConditional {
    /// `log P(q_i = 1 | rest) - log P(q_i = 0 | rest)`.
    pub log_odds: f64,
    pub mean: f64,
    pub var: f64,
}

/// `corr` is `h_i' e_i` with `e_i` the residual that excludes site `i`.
pub fn site_conditional(
    h_energy: f64,
    sigma_eps2: f64,
    sigma_x2: f64,
    lambda: f64,
    corr: f64,
) -> SiteConditional {
    let lambda = clamp_rate(lambda);
    let var = sigma_eps2 * sigma_x2 / (sigma_eps2 + sigma_x2 * h_energy);
    let mean = var / sigma_eps2 * corr;
    // log(nu_i / (1 - lambda)) with nu_i = lambda (s1 / sx) exp(mu^2 / 2 s1^2).
    let log_odds =
        lambda.ln() - (1.0 - lambda).ln() + 0.5 * (var / sigma_x2).ln() + mean * mean / (2.0 * var);
    SiteConditional {
        log_odds,
        mean,
        var,
    }
}

/// One ascending pass over all sites, drawing `q_i` then `x_i`.
pub fn step1_site(state: &mut BgState, z: &[f64], rng: &mut ChainRng) -> Result<()> {
    let m = state.q.len();
    let h = state.h.clone();
    check_len("observation", m + h.len() - 1, z.len())?;
    let h_energy: f64 = h.iter().map(|v| v * v).sum();
    let mut e = z.to_vec();
    for (j, &xj) in state.x.iter().enumerate() {
        if xj != 0.0 {
            add_column(&mut e, &h, j, -xj);
        }
    }
    for i in 0..m {
        let xi = state.x[i];
        if xi != 0.0 {
            add_column(&mut e, &h, i, xi);
        }
        let corr = column_dot(&h, i, &e);
        let cond = site_conditional(h_energy, state.sigma_eps2, state.sigma_x2, state.lambda, corr);
        let u: f64 = rng.random();
        if u.ln() < log_sigmoid_prob(cond.log_odds) {
            let g: f64 = StandardNormal.sample(rng);
            let xn = cond.mean + cond.var.sqrt() * g;
            state.q[i] = true;
            state.x[i] = xn;
            add_column(&mut e, &h, i, -xn);
        } else {
            state.q[i] = false;
            state.x[i] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_joint_posterior, Hyperpriors, ModelDims};
    use rand::SeedableRng;

    #[test]
    fn zero_ir_recovers_prior() {
        let c = site_conditional(0.0, 0.3, 1.0, 0.2, 0.0);
        assert_eq!(c.var, 1.0);
        assert_eq!(c.mean, 0.0);
        let p = 1.0 / (1.0 + (-c.log_odds).exp());
        assert!((p - 0.2).abs() < 1e-15);
    }

    #[test]
    fn log_domain_matches_direct_formula() {
        for &(he, se2, lam, corr) in &[(2.0, 0.5, 0.1, 0.7), (0.8, 0.05, 0.4, -0.3), (1.3, 1.0, 0.02, 1.5)] {
            let c = site_conditional(he, se2, 1.0, lam, corr);
            let s1 = se2 / (se2 + he);
            let mu = s1 / se2 * corr;
            let nu = lam * s1.sqrt() * (mu * mu / (2.0 * s1)).exp();
            let lam_i = nu / (nu + 1.0 - lam);
            let p = 1.0 / (1.0 + (-c.log_odds).exp());
            assert!((p - lam_i).abs() < 1e-12, "{p} vs {lam_i}");
        }
    }

    /// `P(q_i = 1 | rest)` against the joint density with `x_i` integrated
    /// numerically.
    #[test]
    fn flip_probability_matches_quadrature() {
        let dims = ModelDims::new(3, 1).unwrap();
        let base = BgState {
            q: vec![true, false, false],
            x: vec![0.6, 0.0, 0.0],
            h: vec![1.0, -0.4],
            lambda: 0.3,
            sigma_eps2: 0.2,
            sigma_h2: 1.0,
            sigma_x2: 1.0,
        };
        let z = vec![0.5, 0.6, 0.9, -0.2];
        let priors = Hyperpriors::default();
        let i = 1;
        let off = log_joint_posterior(&base, &z, dims, &priors).unwrap();
        let (lo, hi, n) = (-8.0, 8.0, 16_000);
        let step = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let mut s = base.clone();
            s.q[i] = true;
            s.x[i] = lo + k as f64 * step;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            acc += w * (log_joint_posterior(&s, &z, dims, &priors).unwrap() - off).exp();
        }
        let ratio = acc * step;
        let p_quad = ratio / (1.0 + ratio);

        let h_energy = 1.0 + 0.16;
        let mut e = z.clone();
        add_column(&mut e, &base.h, 0, -0.6);
        let corr = column_dot(&base.h, i, &e);
        let c = site_conditional(h_energy, 0.2, 1.0, 0.3, corr);
        let p = 1.0 / (1.0 + (-c.log_odds).exp());
        assert!((p - p_quad).abs() < 1e-4, "{p} vs {p_quad}");
    }

    #[test]
    fn sweep_keeps_invariants() {
        let dims = ModelDims::new(20, 3).unwrap();
        let mut s = BgState {
            q: vec![false; 20],
            x: vec![0.0; 20],
            h: vec![1.0, 0.5, -0.3, 0.1],
            lambda: 0.2,
            sigma_eps2: 0.1,
            sigma_h2: 1.0,
            sigma_x2: 1.0,
        };
        let z: Vec<f64> = (0..23).map(|k| ((k as f64) * 0.7).sin()).collect();
        let mut rng = ChainRng::seed_from_u64(4);
        for _ in 0..200 {
            step1_site(&mut s, &z, &mut rng).unwrap();
            s.validate(dims).unwrap();
        }
    }
}
