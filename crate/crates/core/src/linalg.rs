//! Dense Cholesky factorization with incremental rank-1 maintenance.
//!
//! Factors are upper triangular, `F' F = A`, stored row-major in a full
//! `n x n` buffer. Rows and columns are physically compacted on removal.

use crate::error::{check_len, Error, Result};

/// Threshold on `rho^2 = 1 - p'p` below which a downdate is refused.
pub const DOWNDATE_TOLERANCE: f64 = 1e-12;

/// Number of incremental operations between drift checks.
pub const REFRESH_INTERVAL: usize = 1000;

/// Upper-triangular Cholesky factor `F` with `F' F` equal to the
/// represented symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    n: usize,
    data: Vec<f64>,
}

impl CholFactor {
    pub fn empty() -> Self {
        Self {
            n: 0,
            data: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    /// Wraps a row-major upper-triangular matrix. Entries below the
    /// diagonal are ignored and zeroed.
    pub fn from_upper(n: usize, mut data: Vec<f64>) -> Result<Self> {
        check_len("factor buffer", n * n, data.len())?;
        for r in 0..n {
            for c in 0..r {
                data[r * n + c] = 0.0;
            }
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    /// Row-major `n x n` storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `log |F|`, half the log-determinant of `F' F`.
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i).ln()).sum()
    }

    /// Dense `F' F`, row-major.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..=i).map(|r| self.get(r, i) * self.get(r, j)).sum();
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        out
    }

    /// `F v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|r| {
                self.data[r * n + r..(r + 1) * n]
                    .iter()
                    .zip(&v[r..])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// `F' v`.
    pub fn mul_transpose_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for (r, &vr) in v.iter().enumerate().take(n) {
            if vr == 0.0 {
                continue;
            }
            for c in r..n {
                out[c] += self.data[r * n + c] * vr;
            }
        }
        out
    }

    /// `out += a * F(:, c)`.
    #[inline]
    pub fn axpy_column(&self, c: usize, a: f64, out: &mut [f64]) {
        let n = self.n;
        for (r, o) in out.iter_mut().enumerate().take(c + 1) {
            *o += a * self.data[r * n + c];
        }
    }

    /// Solves `F x = b` by back substitution.
    pub fn solve_upper(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("right-hand side", self.n, b.len())?;
        let n = self.n;
        let mut x = b.to_vec();
        for r in (0..n).rev() {
            let d = self.get(r, r);
            if d == 0.0 {
                return Err(Error::Singular(r));
            }
            let s: f64 = (r + 1..n).map(|c| self.get(r, c) * x[c]).sum();
            x[r] = (x[r] - s) / d;
        }
        Ok(x)
    }

    /// Solves `F' x = b` by forward substitution.
    pub fn solve_lower_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("right-hand side", self.n, b.len())?;
        let n = self.n;
        let mut x = b.to_vec();
        for c in 0..n {
            let d = self.get(c, c);
            if d == 0.0 {
                return Err(Error::Singular(c));
            }
            x[c] /= d;
            let xc = x[c];
            if xc != 0.0 {
                for k in c + 1..n {
                    x[k] -= self.get(c, k) * xc;
                }
            }
        }
        Ok(x)
    }

    /// Replaces `F` by the factor of `F' F + d d'` using a Givens sweep.
    /// Zero diagonal entries are allowed, which is how a bordered factor
    /// `[F 0; 0 0]` is grown by one dimension.
    pub fn rank1_update(&mut self, d: &[f64]) -> Result<()> {
        check_len("update vector", self.n, d.len())?;
        let n = self.n;
        let mut w = d.to_vec();
        for k in 0..n {
            let fkk = self.data[k * n + k];
            let wk = w[k];
            if wk == 0.0 {
                continue;
            }
            let r = fkk.hypot(wk);
            let c = fkk / r;
            let s = wk / r;
            self.data[k * n + k] = r;
            for j in k + 1..n {
                let f = self.data[k * n + j];
                let wj = w[j];
                self.data[k * n + j] = c * f + s * wj;
                w[j] = c * wj - s * f;
            }
        }
        Ok(())
    }

    /// Replaces `F` by the factor of `F' F - d d'`.
    ///
    /// Solves `F' p = d` and requires `rho^2 = 1 - p'p` above
    /// [`DOWNDATE_TOLERANCE`]; the factor is left untouched on breakdown.
    pub fn rank1_downdate(&mut self, d: &[f64]) -> Result<()> {
        check_len("downdate vector", self.n, d.len())?;
        let n = self.n;
        let p = self.solve_lower_transpose(d)?;
        let rho2 = 1.0 - p.iter().map(|v| v * v).sum::<f64>();
        if !(rho2 > DOWNDATE_TOLERANCE) {
            return Err(Error::DowndateBreakdown { rho2 });
        }
        // Rotations that annihilate p against alpha, last entry first
        // (LINPACK dchdd).
        let mut cs = vec![0.0; n];
        let mut sn = vec![0.0; n];
        let mut alpha = rho2.sqrt();
        for i in (0..n).rev() {
            let scale = alpha + p[i].abs();
            let a = alpha / scale;
            let b = p[i] / scale;
            let norm = a.hypot(b);
            cs[i] = a / norm;
            sn[i] = b / norm;
            alpha = scale * norm;
        }
        for j in 0..n {
            let mut xx = 0.0;
            for i in (0..=j).rev() {
                let fij = self.data[i * n + j];
                let t = cs[i] * xx + sn[i] * fij;
                self.data[i * n + j] = cs[i] * fij - sn[i] * xx;
                xx = t;
            }
        }
        for i in 0..n {
            let d = self.data[i * n + i];
            if d < 0.0 {
                for c in i..n {
                    self.data[i * n + c] = -self.data[i * n + c];
                }
            } else if d == 0.0 {
                return Err(Error::DowndateBreakdown { rho2 });
            }
        }
        Ok(())
    }

    /// Appends a zero row and column and applies a rank-1 update with `d`
    /// (length `n + 1`), giving the factor of `[F'F 0; 0 0] + d d'`.
    pub fn extend_with_update(&mut self, d: &[f64]) -> Result<()> {
        check_len("bordered update vector", self.n + 1, d.len())?;
        let n = self.n;
        let m = n + 1;
        let mut data = vec![0.0; m * m];
        for r in 0..n {
            data[r * m..r * m + n].copy_from_slice(&self.data[r * n..(r + 1) * n]);
        }
        self.n = m;
        self.data = data;
        self.rank1_update(d)?;
        if self.get(n, n) <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                pivot: n,
                value: self.get(n, n),
            });
        }
        Ok(())
    }

    /// Deletes row and column `i` without touching the other entries.
    fn compact(&mut self, i: usize) {
        let n = self.n;
        let m = n - 1;
        let mut data = Vec::with_capacity(m * m);
        for r in (0..n).filter(|&r| r != i) {
            for c in (0..n).filter(|&c| c != i) {
                data.push(self.data[r * n + c]);
            }
        }
        self.n = m;
        self.data = data;
    }

    /// Rank-1 update restricted to the trailing block starting at `start`.
    fn trailing_update(&mut self, start: usize, d: &[f64]) {
        let n = self.n;
        let mut w = d.to_vec();
        for (k, kk) in (start..n).enumerate() {
            let fkk = self.data[kk * n + kk];
            let wk = w[k];
            if wk == 0.0 {
                continue;
            }
            let r = fkk.hypot(wk);
            let c = fkk / r;
            let s = wk / r;
            self.data[kk * n + kk] = r;
            for (j, jj) in (kk + 1..n).enumerate().map(|(o, jj)| (k + 1 + o, jj)) {
                let f = self.data[kk * n + jj];
                let wj = w[j];
                self.data[kk * n + jj] = c * f + s * wj;
                w[j] = c * wj - s * f;
            }
        }
    }

    /// Removes index `i` from the inverse-Gram representation: with
    /// `b = F' F(:, i)` and `tau = 1 / b_i`, the result factors
    /// `(F'F - b tau b')` with row and column `i` deleted.
    ///
    /// For an interior `i` the trailing block is first updated by the
    /// remainder of row `i`, then the compacted factor is downdated by
    /// `sqrt(tau) b_{-i}`. A single full-dimension downdate would hit
    /// `rho^2 = 0`.
    pub fn remove_index(&mut self, i: usize) -> Result<()> {
        let n = self.n;
        if i >= n {
            return Err(Error::Dims(format!("index {i} out of range for dimension {n}")));
        }
        if n == 1 {
            *self = Self::empty();
            return Ok(());
        }
        let col: Vec<f64> = (0..=i).map(|r| self.get(r, i)).collect();
        let b: Vec<f64> = (0..n)
            .map(|k| (0..=i.min(k)).map(|r| self.get(r, k) * col[r]).sum())
            .collect();
        let tau = 1.0 / b[i];
        let scale = tau.sqrt();
        let v: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| scale * b[k]).collect();

        let mut work = self.clone();
        if i + 1 < n {
            let e: Vec<f64> = (i + 1..n).map(|c| self.get(i, c)).collect();
            work.trailing_update(i + 1, &e);
        }
        work.compact(i);
        work.rank1_downdate(&v)?;
        *self = work;
        Ok(())
    }

    /// Largest absolute entry of `F'F - target`.
    pub fn gram_deviation(&self, target: &[f64]) -> f64 {
        self.gram()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Cholesky factorization of a symmetric positive-definite row-major
/// matrix: upper-triangular `F` with `F' F = a`.
pub fn cholesky(n: usize, a: &[f64]) -> Result<CholFactor> {
    check_len("matrix", n * n, a.len())?;
    let mut f = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for r in 0..j {
            d -= f[r * n + j] * f[r * n + j];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        f[j * n + j] = djj;
        for c in j + 1..n {
            let mut s = a[j * n + c];
            for r in 0..j {
                s -= f[r * n + j] * f[r * n + c];
            }
            f[j * n + c] = s / djj;
        }
    }
    Ok(CholFactor { n, data: f })
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let f = cholesky(n, a)?;
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let y = f.solve_lower_transpose(&e)?;
        let x = f.solve_upper(&y)?;
        for i in 0..n {
            inv[i * n + j] = x[i];
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    Ok(inv)
}

/// Counts incremental factor operations and signals when a from-scratch
/// refactorization is due.
#[derive(Debug, Clone, Default)]
pub struct DriftMonitor {
    since_refresh: usize,
    pub refreshes: usize,
    /// Refreshes whose deviation exceeded the agreement threshold.
    pub excursions: usize,
    pub max_deviation: f64,
}

impl DriftMonitor {
    pub fn record(&mut self) -> bool {
        self.since_refresh += 1;
        self.since_refresh >= REFRESH_INTERVAL
    }

    pub fn refreshed(&mut self, deviation: f64) {
        self.since_refresh = 0;
        self.refreshes += 1;
        self.max_deviation = self.max_deviation.max(deviation);
        if deviation > 1e-6 {
            self.excursions += 1;
        }
    }

    pub fn reset(&mut self) {
        self.since_refresh = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_factor(n: usize, r: &mut impl FnMut() -> f64) -> CholFactor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0 + r().abs();
            for j in i + 1..n {
                data[i * n + j] = 0.5 * r();
            }
        }
        CholFactor::from_upper(n, data).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_factors_to_identity() {
        let f = cholesky(3, &CholFactor::identity(3).gram()).unwrap();
        assert_eq!(f, CholFactor::identity(3));
    }

    #[test]
    fn recovers_constructed_factor() {
        let mut r = lcg(3);
        for n in 1..8 {
            let f0 = random_factor(n, &mut r);
            let f = cholesky(n, &f0.gram()).unwrap();
            assert!(max_abs_diff(f.as_slice(), f0.as_slice()) < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let a = [1.0, 2.0, 2.0, 1.0];
        match cholesky(2, &a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn triangular_solves() {
        let mut r = lcg(5);
        let b = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(CholFactor::identity(4).solve_upper(&b).unwrap(), b.to_vec());
        let f = random_factor(4, &mut r);
        let x = f.solve_upper(&b).unwrap();
        assert!(max_abs_diff(&f.mul_vec(&x), &b) < 1e-12);
        let y = f.solve_lower_transpose(&b).unwrap();
        assert!(max_abs_diff(&f.mul_transpose_vec(&y), &b) < 1e-12);
        // F'F x = b against Gaussian elimination on the dense system.
        let a = f.gram();
        let sol = f.solve_upper(&f.solve_lower_transpose(&b).unwrap()).unwrap();
        let direct = gauss_solve(4, &a, &b);
        assert!(max_abs_diff(&sol, &direct) < 1e-11);
    }

    fn gauss_solve(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = a[i * n..(i + 1) * n].to_vec();
                row.push(b[i]);
                row
            })
            .collect();
        for k in 0..n {
            let piv = (k..n)
                .max_by(|&x, &y| m[x][k].abs().partial_cmp(&m[y][k].abs()).unwrap())
                .unwrap();
            m.swap(k, piv);
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                for j in k..=n {
                    m[i][j] -= f * m[k][j];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
            x[i] = (m[i][n] - s) / m[i][i];
        }
        x
    }

    #[test]
    fn singular_triangle_is_reported() {
        let f = CholFactor::from_upper(2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(f.solve_upper(&[1.0, 1.0]), Err(Error::Singular(1)));
        assert_eq!(f.solve_lower_transpose(&[1.0, 1.0]), Err(Error::Singular(1)));
    }

    #[test]
    fn update_closed_form() {
        let mut f = CholFactor::identity(2);
        f.rank1_update(&[1.0, 0.0]).unwrap();
        assert!((f.get(0, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(f.get(0, 1), 0.0);
        assert_eq!(f.get(1, 1), 1.0);
        let g = f.clone();
        f.rank1_update(&[0.0, 0.0]).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn update_and_downdate_against_refactorization() {
        let mut r = lcg(9);
        for n in 1..9 {
            let f0 = random_factor(n, &mut r);
            let d: Vec<f64> = (0..n).map(|_| r()).collect();
            let mut f = f0.clone();
            f.rank1_update(&d).unwrap();
            let mut target = f0.gram();
            for i in 0..n {
                for j in 0..n {
                    target[i * n + j] += d[i] * d[j];
                }
            }
            assert!(f.gram_deviation(&target) < 1e-12);
            f.rank1_downdate(&d).unwrap();
            assert!(max_abs_diff(f.as_slice(), f0.as_slice()) < 1e-10);

            // Admissible downdate: shrink a vector until rho^2 > 0.
            let mut g = f0.clone();
            let p: Vec<f64> = (0..n).map(|_| 0.4 * r() / (n as f64).sqrt()).collect();
            let dd = g.mul_transpose_vec(&p);
            g.rank1_downdate(&dd).unwrap();
            let mut target = f0.gram();
            for i in 0..n {
                for j in 0..n {
                    target[i * n + j] -= dd[i] * dd[j];
                }
            }
            assert!(g.gram_deviation(&target) < 1e-11);
            assert!(g.diagonal().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn full_dimension_removal_downdate_breaks_down() {
        let mut r = lcg(13);
        let f = random_factor(5, &mut r);
        for i in 0..5 {
            let col: Vec<f64> = (0..5).map(|k| if k <= i { f.get(k, i) } else { 0.0 }).collect();
            let b = f.mul_transpose_vec(&col);
            let tau = 1.0 / b[i];
            let v: Vec<f64> = b.iter().map(|x| tau.sqrt() * x).collect();
            let mut g = f.clone();
            assert!(matches!(
                g.rank1_downdate(&v),
                Err(Error::DowndateBreakdown { .. })
            ));
            assert_eq!(g, f);
        }
    }

    fn dense_removal_target(f: &CholFactor, i: usize) -> Vec<f64> {
        let n = f.dim();
        let a = f.gram();
        let tau = 1.0 / a[i * n + i];
        let mut out = Vec::new();
        for r in (0..n).filter(|&r| r != i) {
            for c in (0..n).filter(|&c| c != i) {
                out.push(a[r * n + c] - a[r * n + i] * tau * a[i * n + c]);
            }
        }
        out
    }

    #[test]
    fn remove_only_index_collapses() {
        let mut f = CholFactor::identity(1);
        f.remove_index(0).unwrap();
        assert_eq!(f.dim(), 0);
    }

    #[test]
    fn remove_last_index_is_a_single_downdate() {
        let mut r = lcg(17);
        let f0 = random_factor(6, &mut r);
        let mut f = f0.clone();
        f.remove_index(5).unwrap();
        // Top-left block S0 downdated by sqrt(tau) b_{-L}.
        let mut s0 = CholFactor::from_upper(
            5,
            (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).map(|(i, j)| f0.get(i, j)).collect(),
        )
        .unwrap();
        let col: Vec<f64> = (0..6).map(|k| f0.get(k, 5)).collect();
        let b = f0.mul_transpose_vec(&col);
        let tau = 1.0 / b[5];
        let v: Vec<f64> = b[..5].iter().map(|x| tau.sqrt() * x).collect();
        s0.rank1_downdate(&v).unwrap();
        assert!(max_abs_diff(f.as_slice(), s0.as_slice()) < 1e-12);
        let target = dense_removal_target(&f0, 5);
        assert!(f.gram_deviation(&target) < 1e-10);
    }

    #[test]
    fn remove_interior_index_matches_refactorization() {
        let mut r = lcg(19);
        for i in 0..6 {
            let f0 = random_factor(6, &mut r);
            let target = dense_removal_target(&f0, i);
            let mut f = f0.clone();
            f.remove_index(i).unwrap();
            assert_eq!(f.dim(), 5);
            let fresh = cholesky(5, &target).unwrap();
            assert!(max_abs_diff(f.as_slice(), fresh.as_slice()) < 1e-10);
        }
    }

    #[test]
    fn extend_grows_bordered_factor() {
        let mut r = lcg(23);
        let f0 = random_factor(4, &mut r);
        let d: Vec<f64> = (0..5).map(|_| r()).collect();
        let mut f = f0.clone();
        f.extend_with_update(&d).unwrap();
        let g0 = f0.gram();
        let mut target = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                let base = if i < 4 && j < 4 { g0[i * 4 + j] } else { 0.0 };
                target[i * 5 + j] = base + d[i] * d[j];
            }
        }
        assert!(f.gram_deviation(&target) < 1e-12);
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let mut r = lcg(29);
        let f = random_factor(5, &mut r);
        let a = f.gram();
        let inv = spd_inverse(5, &a).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let s: f64 = (0..5).map(|k| a[i * 5 + k] * inv[k * 5 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn update_then_downdate_is_identity(
            n in 1usize..10,
            seed in any::<u64>(),
        ) {
            let mut r = lcg(seed);
            let f0 = random_factor(n, &mut r);
            let d: Vec<f64> = (0..n).map(|_| 2.0 * r()).collect();
            let mut f = f0.clone();
            f.rank1_update(&d).unwrap();
            f.rank1_downdate(&d).unwrap();
            prop_assert!(max_abs_diff(f.as_slice(), f0.as_slice()) < 1e-10);
        }
    }
}
