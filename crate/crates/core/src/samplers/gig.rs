//! Generalized Inverse Gaussian sampling.
//!
//! Density on `s > 0` proportional to `s^(lambda-1) exp(-(alpha s + beta / s) / 2)`.
//! Draws are made in the standardized form `GIG(|lambda|, omega)` with
//! `omega = sqrt(alpha beta)` and rescaled by `sqrt(beta / alpha)`; negative
//! `lambda` uses the reciprocal symmetry. The standardized draw uses one of
//! three rejection schemes (Hörmann and Leydold, 2014):
//!
//! * ratio of uniforms around the shifted mode for `lambda > 2` or `omega > 3`,
//! * ratio of uniforms without shift for moderate parameters,
//! * a piecewise hat that is gamma-like near zero and exponential in the
//!   tail for small `lambda < 1` and `omega`.
//!
//! When `alpha beta` underflows the gamma / inverse-gamma limits are used.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::ChainRng;

pub const MAX_REJECTIONS: usize = 10_000;

const ZERO_TOL: f64 = 10.0 * f64::EPSILON;

pub fn sample_gig(lambda: f64, alpha: f64, beta: f64, rng: &mut ChainRng) -> Result<f64> {
    if !(lambda.is_finite() && alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite())
    {
        return Err(Error::Domain(format!(
            "invalid GIG parameters ({lambda}, {alpha}, {beta})"
        )));
    }
    if beta < ZERO_TOL {
        if lambda > 0.0 && alpha > 0.0 {
            return Ok(gamma(lambda, 2.0 / alpha, rng));
        }
        return Err(Error::Domain(format!(
            "GIG with beta = {beta} needs lambda > 0 and alpha > 0"
        )));
    }
    if alpha < ZERO_TOL {
        if lambda < 0.0 {
            return Ok(1.0 / gamma(-lambda, 2.0 / beta, rng));
        }
        return Err(Error::Domain(format!(
            "GIG with alpha = {alpha} needs lambda < 0"
        )));
    }

    let abs_lambda = lambda.abs();
    let omega = (alpha * beta).sqrt();
    let scale = (beta / alpha).sqrt();
    let y = if abs_lambda > 2.0 || omega > 3.0 {
        rou_shifted(abs_lambda, omega, rng)?
    } else if abs_lambda >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        rou_plain(abs_lambda, omega, rng)?
    } else {
        concave_hat(abs_lambda, omega, rng)?
    };
    Ok(if lambda < 0.0 { scale / y } else { scale * y })
}

fn gamma(shape: f64, scale: f64, rng: &mut ChainRng) -> f64 {
    Gamma::new(shape, scale)
        .expect("positive gamma parameters")
        .sample(rng)
}

fn mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        ((lambda - 1.0).hypot(omega) + (lambda - 1.0)) / omega
    } else {
        omega / ((1.0 - lambda).hypot(omega) + (1.0 - lambda))
    }
}

fn rou_plain(lambda: f64, omega: f64, rng: &mut ChainRng) -> Result<f64> {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + (lambda + 1.0).hypot(omega)) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    for _ in 0..MAX_REJECTIONS {
        let u = um * rng.random::<f64>();
        let v: f64 = rng.random();
        let x = u / v;
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return Ok(x);
        }
    }
    Err(Error::GigRejections(MAX_REJECTIONS))
}

fn rou_shifted(lambda: f64, omega: f64, rng: &mut ChainRng) -> Result<f64> {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);

    // Extremal points of x sqrt(f(x + xm)) are roots of a cubic.
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let fi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();

    for _ in 0..MAX_REJECTIONS {
        let u = uminus + rng.random::<f64>() * (uplus - uminus);
        let v: f64 = rng.random();
        let x = u / v + xm;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return Ok(x);
        }
    }
    Err(Error::GigRejections(MAX_REJECTIONS))
}

fn concave_hat(lambda: f64, omega: f64, rng: &mut ChainRng) -> Result<f64> {
    let xm = mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;
    let tail_start = x0.max(2.0 / omega);

    for _ in 0..MAX_REJECTIONS {
        let mut v = total * rng.random::<f64>();
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    x = omega * (omega.exp() * v).exp();
                    hx = k1 / x;
                } else {
                    x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    hx = k1 * x.powf(lambda - 1.0);
                }
            } else {
                v -= a1;
                x = -2.0 / omega * ((-omega / 2.0 * tail_start).exp() - omega / (2.0 * k2) * v).ln();
                hx = k2 * (-omega / 2.0 * x).exp();
            }
        }
        let u = rng.random::<f64>() * hx;
        if u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return Ok(x);
        }
    }
    Err(Error::GigRejections(MAX_REJECTIONS))
}
