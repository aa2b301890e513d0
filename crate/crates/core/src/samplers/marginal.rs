//! Sampling of `q` with the amplitudes integrated out.
//!
//! The state keeps the upper-triangular factor `F` of `C^{-1}`, where
//! `C = G'G / sigma_eps2 + I` and `G` holds the columns of `H` at active
//! sites. Columns of `G` are never formed: `G'h_i` and `G'z` are read from
//! the autocorrelation of `h` and from `H'z`. Spikes are appended to the
//! factor in the order they are switched on, so `active[r]` is the signal
//! index of factor row `r`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{clamp_rate, log_sigmoid_prob, ChainStats};
use crate::error::{check_len, Error, Result};
use crate::linalg::{cholesky, spd_inverse, CholFactor, DriftMonitor};
use crate::model::{autocorrelation, BgState, ConvOperator, ModelDims};
use crate::ChainRng;

/// Quantities of one site visit, exposed for verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteVisit {
    pub site: usize,
    pub was_active: bool,
    /// `f(1 - q_i) - f(q_i)`.
    pub delta_f: f64,
    pub tau: f64,
    pub flipped: bool,
}

#[derive(Debug, Clone)]
pub struct MarginalState {
    factor: CholFactor,
    active: Vec<usize>,
    fgz: Vec<f64>,
    htz: Vec<f64>,
    acorr: Vec<f64>,
    h_energy: f64,
    sigma_eps2: f64,
    monitor: DriftMonitor,
}

impl MarginalState {
    /// Builds `F` from scratch for the current `(q, h, sigma_eps2)`.
    pub fn new(state: &BgState, z: &[f64]) -> Result<Self> {
        let m = state.q.len();
        let dims = ModelDims::new(m, state.h.len() - 1)?;
        check_len("observation", dims.n, z.len())?;
        let op = ConvOperator::new(dims, state.h.clone())?;
        let acorr = autocorrelation(&state.h);
        let mut ms = Self {
            factor: CholFactor::empty(),
            active: (0..m).filter(|&i| state.q[i]).collect(),
            fgz: Vec::new(),
            htz: op.correlate(z)?,
            h_energy: acorr[0],
            acorr,
            sigma_eps2: state.sigma_eps2,
            monitor: DriftMonitor::default(),
        };
        ms.factor = ms.fresh_factor()?;
        ms.refresh_fgz();
        Ok(ms)
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn monitor(&self) -> &DriftMonitor {
        &self.monitor
    }

    fn lag(&self, a: usize, b: usize) -> f64 {
        self.acorr.get(a.abs_diff(b)).copied().unwrap_or(0.0)
    }

    /// Dense `C^{-1} = (G'G / sigma_eps2 + I)^{-1}` for the current active set.
    pub fn target_inverse(&self) -> Result<Vec<f64>> {
        let l = self.active.len();
        let mut c = vec![0.0; l * l];
        for (r, &a) in self.active.iter().enumerate() {
            for (s, &b) in self.active.iter().enumerate() {
                c[r * l + s] = self.lag(a, b) / self.sigma_eps2;
            }
            c[r * l + r] += 1.0;
        }
        spd_inverse(l, &c)
    }

    fn fresh_factor(&self) -> Result<CholFactor> {
        let l = self.active.len();
        if l == 0 {
            return Ok(CholFactor::empty());
        }
        cholesky(l, &self.target_inverse()?)
    }

    fn rebuild(&mut self) -> Result<()> {
        self.factor = self.fresh_factor()?;
        self.monitor.reset();
        self.refresh_fgz();
        Ok(())
    }

    fn refresh_fgz(&mut self) {
        let gtz: Vec<f64> = self.active.iter().map(|&a| self.htz[a]).collect();
        self.fgz = self.factor.mul_vec(&gtz);
    }

    /// `F G' h_i`, exploiting that `h_a' h_i` vanishes beyond lag `P`.
    fn fgh(&self, i: usize) -> Vec<f64> {
        let mut u = vec![0.0; self.active.len()];
        let p = self.acorr.len() - 1;
        for (r, &a) in self.active.iter().enumerate() {
            if a.abs_diff(i) <= p {
                self.factor.axpy_column(r, self.lag(a, i), &mut u);
            }
        }
        u
    }

    /// `(f(1 - q_i) - f(q_i), tau_i, F G' h_i)` for the current active set;
    /// the last entry is empty for an active site.
    pub fn delta_f(&self, i: usize, is_active: bool, lambda: f64) -> (f64, f64, Vec<f64>) {
        let lambda = clamp_rate(lambda);
        let se2 = self.sigma_eps2;
        if is_active {
            if let Some(r) = self.active.iter().position(|&a| a == i) {
                // For an active site -tau is the posterior variance of x_i,
                // (C^{-1})_rr, and phi / sigma_eps2 its posterior mean. Both
                // come straight from F; the generic expression below loses
                // most digits to cancellation at high SNR.
                let var: f64 = (0..=r).map(|k| self.factor.get(k, r).powi(2)).sum();
                let mean = (0..=r).map(|k| self.factor.get(k, r) * self.fgz[k]).sum::<f64>() / se2;
                let df = var.ln() + mean * mean / var - 2.0 * (1.0 / lambda - 1.0).ln();
                return (df, -var, Vec::new());
            }
        }
        let delta = if is_active { -1.0 } else { 1.0 };
        let u = self.fgh(i);
        let u_energy: f64 = u.iter().map(|v| v * v).sum();
        let tau = delta + self.h_energy / se2 - u_energy / (se2 * se2);
        let cross: f64 = self.fgz.iter().zip(&u).map(|(a, b)| a * b).sum();
        let phi = self.htz[i] - cross / se2;
        let df = (delta * tau).ln() - phi * phi / (se2 * se2 * tau)
            + 2.0 * delta * (1.0 / lambda - 1.0).ln();
        (df, tau, u)
    }

    fn add(&mut self, i: usize, tau: f64, u: &[f64]) -> Result<()> {
        let ft_u = self.factor.mul_transpose_vec(u);
        let scale = -1.0 / (self.sigma_eps2 * tau.sqrt());
        let mut d: Vec<f64> = ft_u.iter().map(|v| scale * v).collect();
        d.push(1.0 / tau.sqrt());
        self.factor.extend_with_update(&d)?;
        self.active.push(i);
        Ok(())
    }

    fn remove(&mut self, i: usize, stats: &mut ChainStats) -> Result<()> {
        let rank = self
            .active
            .iter()
            .position(|&a| a == i)
            .ok_or_else(|| Error::Invariant(format!("site {i} is not in the active set")))?;
        match self.factor.remove_index(rank) {
            Ok(()) => {
                self.active.remove(rank);
                Ok(())
            }
            Err(Error::DowndateBreakdown { .. }) => {
                stats.downdate_fallbacks += 1;
                self.active.remove(rank);
                self.rebuild()
            }
            Err(e) => Err(e),
        }
    }

    fn after_change(&mut self, stats: &mut ChainStats) -> Result<()> {
        if self.monitor.record() {
            let fresh = self.fresh_factor()?;
            let dev = self.factor.gram_deviation(&fresh.gram());
            self.monitor.refreshed(dev);
            stats.drift_refreshes += 1;
            if dev > 1e-6 {
                stats.drift_excursions += 1;
            }
            self.factor = fresh;
        }
        self.refresh_fgz();
        Ok(())
    }
}

/// Step 1 with `x` marginalized: sequential draws of every `q_i`, then one
/// joint draw of the active amplitudes.
pub fn step1_marginal(
    state: &mut BgState,
    z: &[f64],
    ms: &mut MarginalState,
    rng: &mut ChainRng,
    stats: &mut ChainStats,
) -> Result<()> {
    step1_marginal_inspect(state, z, ms, rng, stats, |_, _| {})
}

/// [`step1_marginal`] calling `inspect` before each site decision is
/// applied, with the marginal state as it was at the visit.
pub fn step1_marginal_inspect<F>(
    state: &mut BgState,
    z: &[f64],
    ms: &mut MarginalState,
    rng: &mut ChainRng,
    stats: &mut ChainStats,
    mut inspect: F,
) -> Result<()>
where
    F: FnMut(&SiteVisit, &MarginalState),
{
    let m = state.q.len();
    check_len("observation", m + state.h.len() - 1, z.len())?;
    for i in 0..m {
        let was_active = state.q[i];
        let (mut df, mut tau, mut u) = ms.delta_f(i, was_active, state.lambda);
        let delta = if was_active { -1.0 } else { 1.0 };
        if !(delta * tau > 0.0) || !df.is_finite() {
            // Roundoff in the maintained factor; start over from C.
            stats.downdate_fallbacks += 1;
            ms.rebuild()?;
            (df, tau, u) = ms.delta_f(i, was_active, state.lambda);
            if !(delta * tau > 0.0) {
                return Err(Error::Invariant(format!(
                    "tau_{i} = {tau:e} has the wrong sign"
                )));
            }
        }
        let r: f64 = rng.random();
        let flipped = r.ln() < log_sigmoid_prob(-0.5 * df);
        inspect(
            &SiteVisit {
                site: i,
                was_active,
                delta_f: df,
                tau,
                flipped,
            },
            ms,
        );
        if flipped {
            if was_active {
                ms.remove(i, stats)?;
                state.q[i] = false;
            } else {
                ms.add(i, tau, &u)?;
                state.q[i] = true;
            }
            ms.after_change(stats)?;
        }
    }

    // x_active = F'(F G'z / sigma_eps2 + n).
    let noise: Vec<f64> = ms
        .fgz
        .iter()
        .map(|v| {
            let g: f64 = StandardNormal.sample(rng);
            v / ms.sigma_eps2 + g
        })
        .collect();
    let xa = ms.factor.mul_transpose_vec(&noise);
    state.x.iter_mut().for_each(|v| *v = 0.0);
    for (r, &a) in ms.active.iter().enumerate() {
        state.x[a] = xa[r];
    }
    Ok(())
}

/// Posterior mean of the amplitudes given `(q, h, sigma_eps2)`:
/// `C^{-1} G'z / sigma_eps2` on the active set, zero elsewhere.
pub fn conditional_mean_x(state: &BgState, z: &[f64]) -> Result<Vec<f64>> {
    let ms = MarginalState::new(state, z)?;
    let ft: Vec<f64> = ms.fgz.iter().map(|v| v / ms.sigma_eps2).collect();
    let xa = ms.factor.mul_transpose_vec(&ft);
    let mut x = vec![0.0; state.q.len()];
    for (r, &a) in ms.active.iter().enumerate() {
        x[a] = xa[r];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_state(seed: u64) -> (BgState, Vec<f64>) {
        let mut rng = ChainRng::seed_from_u64(seed);
        let m = 10;
        let h: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut q = vec![false; m];
        for _ in 0..4 {
            q[rng.random_range(0..m)] = true;
        }
        let z: Vec<f64> = (0..13).map(|_| rng.random::<f64>() - 0.5).collect();
        (
            BgState {
                x: vec![0.0; m],
                q,
                h,
                lambda: 0.2,
                sigma_eps2: 0.05,
                sigma_h2: 1.0,
                sigma_x2: 1.0,
            },
            z,
        )
    }

    #[test]
    fn empty_active_set_closed_form() {
        let (mut s, z) = sample_state(1);
        s.q.iter_mut().for_each(|q| *q = false);
        let ms = MarginalState::new(&s, &z).unwrap();
        let op = ConvOperator::new(ModelDims::new(10, 3).unwrap(), s.h.clone()).unwrap();
        let htz = op.correlate(&z).unwrap();
        let he: f64 = s.h.iter().map(|v| v * v).sum();
        for i in 0..10 {
            let (df, tau, _) = ms.delta_f(i, false, s.lambda);
            let tau_want = 1.0 + he / s.sigma_eps2;
            let want = tau_want.ln() - htz[i].powi(2) / (s.sigma_eps2.powi(2) * tau_want)
                + 2.0 * (1.0 / s.lambda - 1.0).ln();
            assert!((tau - tau_want).abs() < 1e-12);
            assert!((df - want).abs() < 1e-10);
        }
    }

    #[test]
    fn maintained_factor_tracks_fresh_factorization() {
        let (mut s, z) = sample_state(2);
        let mut ms = MarginalState::new(&s, &z).unwrap();
        let mut rng = ChainRng::seed_from_u64(3);
        let mut stats = ChainStats::default();
        for _ in 0..200 {
            step1_marginal_inspect(&mut s, &z, &mut ms, &mut rng, &mut stats, |v, _| {
                assert!(if v.was_active { v.tau < 0.0 } else { v.tau > 0.0 });
            })
            .unwrap();
            let mut sorted = ms.active().to_vec();
            sorted.sort_unstable();
            let from_q: Vec<usize> = (0..10).filter(|&i| s.q[i]).collect();
            assert_eq!(sorted, from_q);
            let target = ms.target_inverse().unwrap();
            assert!(ms.factor().gram_deviation(&target) < 1e-8);
            for i in 0..10 {
                assert!(s.q[i] || s.x[i] == 0.0);
            }
        }
    }

    #[test]
    fn removal_is_the_exact_reverse_of_addition_at_high_snr() {
        for seed in 0..20 {
            let (mut with, z) = sample_state(seed);
            with.sigma_eps2 = 1e-5;
            let Some(i) = (0..10).find(|&i| with.q[i]) else { continue };
            let mut without = with.clone();
            without.q[i] = false;
            let add = MarginalState::new(&without, &z).unwrap().delta_f(i, false, 0.2).0;
            let remove = MarginalState::new(&with, &z).unwrap().delta_f(i, true, 0.2).0;
            assert!((add + remove).abs() <= 1e-10 * add.abs().max(1.0), "{add} vs {remove}");
        }
    }
}
