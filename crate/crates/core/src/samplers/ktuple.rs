//! Grouped Gibbs sampling of `K` adjacent sites.
//!
//! Because `H'H` is Toeplitz under the zero boundary, the posterior
//! precision of the amplitudes on a pattern `w` of active offsets does not
//! depend on the window position, so one Cholesky factor per pattern is
//! computed per sweep.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{clamp_rate, log_sum_exp};
use crate::error::{check_len, Error, Result};
use crate::model::{add_column, autocorrelation, column_dot, BgState};
use crate::ChainRng;

pub const MAX_K: usize = 4;

/// Upper-triangular factor `U_w` of `S_w = H_w'H_w / sigma_eps2 + I / sigma_x2`
/// for one pattern, stored densely with at most `MAX_K` rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternFactor {
    pub offsets: [usize; MAX_K],
    pub len: usize,
    pub u: [[f64; MAX_K]; MAX_K],
    /// `log |U_w|^{-1}`, i.e. `log |R_w|^{1/2}`.
    pub log_alpha: f64,
}

impl PatternFactor {
    /// Solves `U' c = t`.
    fn forward(&self, t: &[f64; MAX_K]) -> [f64; MAX_K] {
        let mut c = [0.0; MAX_K];
        for a in 0..self.len {
            let mut s = t[a];
            for r in 0..a {
                s -= self.u[r][a] * c[r];
            }
            c[a] = s / self.u[a][a];
        }
        c
    }

    /// Solves `U x = y`.
    fn backward(&self, y: &[f64; MAX_K]) -> [f64; MAX_K] {
        let mut x = [0.0; MAX_K];
        for a in (0..self.len).rev() {
            let mut s = y[a];
            for c in a + 1..self.len {
                s -= self.u[a][c] * x[c];
            }
            x[a] = s / self.u[a][a];
        }
        x
    }
}

/// One factor per nonempty pattern of a `K`-site window, indexed by the
/// pattern bitmask (bit `m` set when offset `m` is active).
#[derive(Debug, Clone, PartialEq)]
pub struct KTupleTables {
    k: usize,
    sigma_eps2: f64,
    sigma_x2: f64,
    patterns: Vec<PatternFactor>,
}

impl KTupleTables {
    pub fn build(h: &[f64], sigma_eps2: f64, sigma_x2: f64, k: usize) -> Result<Self> {
        if !(1..=MAX_K).contains(&k) {
            return Err(Error::Domain(format!("tuple size {k} not in 1..={MAX_K}")));
        }
        let acorr = autocorrelation(h);
        let lag = |d: usize| acorr.get(d).copied().unwrap_or(0.0);
        let mut patterns = Vec::with_capacity(1 << k);
        patterns.push(PatternFactor {
            offsets: [0; MAX_K],
            len: 0,
            u: [[0.0; MAX_K]; MAX_K],
            log_alpha: 0.0,
        });
        for mask in 1usize..(1 << k) {
            let mut offsets = [0; MAX_K];
            let mut len = 0;
            for m in 0..k {
                if mask & (1 << m) != 0 {
                    offsets[len] = m;
                    len += 1;
                }
            }
            let mut s = vec![0.0; len * len];
            for a in 0..len {
                for b in 0..len {
                    s[a * len + b] = lag(offsets[a].abs_diff(offsets[b])) / sigma_eps2;
                }
                s[a * len + a] += 1.0 / sigma_x2;
            }
            let f = crate::linalg::cholesky(len, &s)?;
            let mut u = [[0.0; MAX_K]; MAX_K];
            for a in 0..len {
                for b in a..len {
                    u[a][b] = f.get(a, b);
                }
            }
            patterns.push(PatternFactor {
                offsets,
                len,
                u,
                log_alpha: -f.log_det(),
            });
        }
        Ok(Self {
            k,
            sigma_eps2,
            sigma_x2,
            patterns,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Entry `mask` of the table; entry 0 is the empty pattern.
    pub fn pattern(&self, mask: usize) -> &PatternFactor {
        &self.patterns[mask]
    }

    /// Unnormalized log weights `log p_{i+w}` for every pattern (entry 0
    /// is the empty pattern with weight 1). `corr[m] = h_{i+m}' e_{K,i}`.
    pub fn log_weights(&self, corr: &[f64], lambda: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.patterns.len()];
        self.fill_log_weights(corr, lambda, &mut out, None);
        out
    }

    fn fill_log_weights(
        &self,
        corr: &[f64],
        lambda: f64,
        out: &mut [f64],
        mut keep_c: Option<&mut [[f64; MAX_K]]>,
    ) {
        let lambda = clamp_rate(lambda);
        let log_prior_odds = (1.0 / lambda - 1.0).ln();
        let log_sx = 0.5 * self.sigma_x2.ln();
        out[0] = 0.0;
        for (mask, pf) in self.patterns.iter().enumerate().skip(1) {
            let mut t = [0.0; MAX_K];
            for a in 0..pf.len {
                t[a] = corr[pf.offsets[a]] / self.sigma_eps2;
            }
            let c = pf.forward(&t);
            let energy: f64 = c[..pf.len].iter().map(|v| v * v).sum();
            let l = pf.len as f64;
            out[mask] = -l * log_sx + pf.log_alpha + 0.5 * energy - l * log_prior_odds;
            if let Some(store) = keep_c.as_deref_mut() {
                store[mask] = c;
            }
        }
    }
}

/// One pass of windows `i = 0..=M-K`, each drawing the joint pattern of the
/// window and then its amplitudes.
pub fn step1_ktuple(
    state: &mut BgState,
    z: &[f64],
    tables: &KTupleTables,
    rng: &mut ChainRng,
) -> Result<()> {
    let m = state.q.len();
    let k = tables.k;
    let h = state.h.clone();
    check_len("observation", m + h.len() - 1, z.len())?;
    if k > m {
        return Err(Error::Dims(format!("tuple size {k} exceeds spike train length {m}")));
    }
    let mut e = z.to_vec();
    for (j, &xj) in state.x.iter().enumerate() {
        if xj != 0.0 {
            add_column(&mut e, &h, j, -xj);
        }
    }
    let n_patterns = 1 << k;
    let mut log_w = vec![0.0; n_patterns];
    let mut cs = vec![[0.0; MAX_K]; n_patterns];
    let mut corr = [0.0; MAX_K];
    for i in 0..=m - k {
        // e <- e_{K,i}: put the window's own contribution back.
        for off in 0..k {
            let xj = state.x[i + off];
            if xj != 0.0 {
                add_column(&mut e, &h, i + off, xj);
            }
        }
        for (off, c) in corr.iter_mut().enumerate().take(k) {
            *c = column_dot(&h, i + off, &e);
        }
        tables.fill_log_weights(&corr[..k], state.lambda, &mut log_w, Some(&mut cs));
        let mask = sample_log_weights(&log_w, rng);
        for off in 0..k {
            state.q[i + off] = false;
            state.x[i + off] = 0.0;
        }
        if mask != 0 {
            let pf = tables.pattern(mask);
            let mut y = cs[mask];
            for v in y.iter_mut().take(pf.len) {
                let g: f64 = StandardNormal.sample(rng);
                *v += g;
            }
            let xw = pf.backward(&y);
            for a in 0..pf.len {
                let j = i + pf.offsets[a];
                state.q[j] = true;
                state.x[j] = xw[a];
                add_column(&mut e, &h, j, -xw[a]);
            }
        }
    }
    Ok(())
}

fn sample_log_weights(log_w: &[f64], rng: &mut ChainRng) -> usize {
    let norm = log_sum_exp(log_w);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, &lw) in log_w.iter().enumerate() {
        acc += (lw - norm).exp();
        if u < acc {
            return idx;
        }
    }
    // Rounding left u above the accumulated mass: take the last pattern
    // with non-negligible weight.
    log_w
        .iter()
        .enumerate()
        .rev()
        .find(|(_, &lw)| (lw - norm).exp() > 0.0)
        .map(|(idx, _)| idx)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::site::site_conditional;
    use rand::SeedableRng;

    #[test]
    fn table_has_one_entry_per_nonempty_pattern() {
        for k in 1..=4 {
            let t = KTupleTables::build(&[1.0, 0.5, -0.2], 0.1, 1.0, k).unwrap();
            assert_eq!(t.patterns.len() - 1, (1 << k) - 1);
        }
        assert!(KTupleTables::build(&[1.0], 0.1, 1.0, 5).is_err());
    }

    #[test]
    fn single_site_weights_reduce_to_site_odds() {
        let h = [0.9, -0.3, 0.25, 0.1];
        let h_energy: f64 = h.iter().map(|v| v * v).sum();
        for &(se2, lam, corr) in &[(0.05, 0.1, 0.4), (0.5, 0.3, -1.2), (1e-3, 0.05, 0.02)] {
            let t = KTupleTables::build(&h, se2, 1.0, 1).unwrap();
            let w = t.log_weights(&[corr], lam);
            let c = site_conditional(h_energy, se2, 1.0, lam, corr);
            assert!((w[1] - w[0] - c.log_odds).abs() < 1e-10 * c.log_odds.abs().max(1.0));
        }
    }

    #[test]
    fn dominant_rate_selects_full_pattern() {
        let h = [1.0, 0.4];
        let t = KTupleTables::build(&h, 0.5, 1.0, 3).unwrap();
        let w = t.log_weights(&[0.1, -0.2, 0.05], 1.0 - 1e-12);
        let norm = log_sum_exp(&w);
        assert!((w[7] - norm).exp() > 1.0 - 1e-9);
    }

    #[test]
    fn sweep_keeps_invariants() {
        let mut s = BgState {
            q: vec![false; 15],
            x: vec![0.0; 15],
            h: vec![1.0, 0.5, -0.3],
            lambda: 0.2,
            sigma_eps2: 0.1,
            sigma_h2: 1.0,
            sigma_x2: 1.0,
        };
        let z: Vec<f64> = (0..17).map(|k| ((k as f64) * 0.9).cos()).collect();
        let mut rng = ChainRng::seed_from_u64(8);
        for k in 1..=4 {
            let t = KTupleTables::build(&s.h, s.sigma_eps2, 1.0, k).unwrap();
            for _ in 0..100 {
                step1_ktuple(&mut s, &z, &t, &mut rng).unwrap();
                for i in 0..15 {
                    assert!(s.q[i] || s.x[i] == 0.0);
                }
            }
        }
    }
}
