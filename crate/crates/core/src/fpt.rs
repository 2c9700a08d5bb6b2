//! First passage of a drifted Brownian motion out of the interval `(0, b)`.
//!
//! The process starts at `c·b`, has drift `μ = d·b` per unit time and unit
//! diffusion variance. `A` records the exit boundary (0 = lower, 1 = upper)
//! and `T` the exit time. The joint sub-density `g(a, t)` is evaluated from
//! the standardized zero-drift density `f(u | w)` on the unit interval,
//!
//! ```text
//! ln g(0, t) = -2 ln b - d·c·b² - d²·b²·t/2 + ln f(t/b², c)
//! ```
//!
//! and the upper boundary follows from reflection (`c → 1-c`, `d → -d`).
//! `f` has two classical series representations: an image series that
//! converges quickly for small `u` and a trigonometric series that converges
//! quickly for large `u`. Each evaluation picks whichever needs fewer terms
//! for an absolute tail bound of [`SERIES_TOL`].

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_add_exp, log_ndtr, sigmoid, LN_2PI};
use crate::quad;

/// Absolute tail bound on the standardized density per evaluation.
pub const SERIES_TOL: f64 = 1e-12;
/// Hard cap on series terms.
pub const MAX_TERMS: usize = 500;
/// Extra terms beyond the density bound so the derivative sums converge too.
const DERIV_MARGIN: usize = 2;
/// Bisection width for inverse-CDF sampling.
pub const SAMPLER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Boundary {
    Lower,
    Upper,
}

impl Boundary {
    pub fn from_indicator(a: u8) -> Boundary {
        if a == 0 {
            Boundary::Lower
        } else {
            Boundary::Upper
        }
    }

    pub fn indicator(self) -> u8 {
        match self {
            Boundary::Lower => 0,
            Boundary::Upper => 1,
        }
    }
}

/// Boundary `b`, relative start `c` and drift coefficient `d` of one
/// first-passage problem. The diffusion variance is fixed at one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FptSpec {
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl FptSpec {
    pub fn new(b: f64, c: f64, d: f64) -> Result<Self> {
        let spec = FptSpec { b, c, d };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b.is_finite() && self.b > 0.0) {
            return Err(Error::ParamDomain(format!("b must be finite and positive, got {}", self.b)));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::ParamDomain(format!("c must lie in (0, 1), got {}", self.c)));
        }
        if !(self.d.is_finite() && self.drift().is_finite()) {
            return Err(Error::ParamDomain(format!("drift must be finite, got d = {}", self.d)));
        }
        Ok(())
    }

    /// Process drift `μ = d·b`.
    pub fn drift(&self) -> f64 {
        self.d * self.b
    }

    /// Starting point `c·b`.
    pub fn start(&self) -> f64 {
        self.c * self.b
    }

    /// Mirror image of the problem: upper exits of `self` are lower exits of
    /// the result.
    pub fn reflected(&self) -> FptSpec {
        FptSpec {
            b: self.b,
            c: 1.0 - self.c,
            d: -self.d,
        }
    }
}

/// `ln f(u | w)` and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct StdDensity {
    pub ln_f: f64,
    pub d_u: f64,
    pub d_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Series {
    SmallTime,
    LargeTime,
}

fn large_time_terms(u: f64, eps: f64) -> f64 {
    let floor = 1.0 / (PI * u.sqrt());
    let x = PI * u * eps;
    if x < 1.0 {
        (-2.0 * x.ln() / (PI * PI * u)).sqrt().max(floor)
    } else {
        floor
    }
}

fn small_time_terms(u: f64, eps: f64) -> f64 {
    let floor = u.sqrt() + 1.0;
    let x = 2.0 * (2.0 * PI * u).sqrt() * eps;
    if x < 1.0 {
        (2.0 + (-2.0 * u * x.ln()).sqrt()).max(floor)
    } else {
        2.0
    }
}

/// Series and term count needed for the tail bound at `u`.
pub(crate) fn series_choice(u: f64) -> (Series, usize) {
    let ks = small_time_terms(u, SERIES_TOL);
    let kl = large_time_terms(u, SERIES_TOL);
    if ks < kl {
        (Series::SmallTime, ks.ceil() as usize)
    } else {
        (Series::LargeTime, kl.ceil() as usize)
    }
}

/// Image-method series with `n` terms, factored around the `k = 0` image.
pub(crate) fn std_density_small(u: f64, w: f64, n: usize) -> Option<StdDensity> {
    let kmin = -(((n.max(1) - 1) / 2) as i64);
    let kmax = (n / 2) as i64;
    let w2 = w * w;
    let inv_2u = 0.5 / u;
    let (mut s, mut su, mut sw) = (0.0, 0.0, 0.0);
    for k in kmin..=kmax {
        let r = w + 2.0 * k as f64;
        let q = r * r - w2;
        let e = (-q * inv_2u).exp();
        s += r * e;
        su += r * e * q * inv_2u / u;
        sw += e * (1.0 - r * (r - w) / u);
    }
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    Some(StdDensity {
        ln_f: -0.5 * LN_2PI - 1.5 * u.ln() - w2 * inv_2u + s.ln(),
        d_u: -1.5 / u + w2 * inv_2u / u + su / s,
        d_w: -w / u + sw / s,
    })
}

/// Trigonometric series with `n` terms, factored around the `k = 1` mode.
pub(crate) fn std_density_large(u: f64, w: f64, n: usize) -> Option<StdDensity> {
    let half_pi2 = 0.5 * PI * PI;
    let (mut s, mut su, mut sw) = (0.0, 0.0, 0.0);
    for k in 1..=n.max(1) {
        let kf = k as f64;
        let rate = (kf * kf - 1.0) * half_pi2;
        let e = (-rate * u).exp();
        let (sn, cs) = (kf * PI * w).sin_cos();
        s += kf * e * sn;
        su -= kf * e * sn * rate;
        sw += kf * kf * PI * e * cs;
    }
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    Some(StdDensity {
        ln_f: PI.ln() - half_pi2 * u + s.ln(),
        d_u: -half_pi2 + su / s,
        d_w: sw / s,
    })
}

/// Standardized zero-drift lower-exit density on the unit interval.
pub(crate) fn std_density(u: f64, w: f64) -> Result<StdDensity> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::Domain(format!("scaled time must be positive and finite, got {u}")));
    }
    let (series, n) = series_choice(u);
    if n > MAX_TERMS {
        let bound = match series {
            Series::SmallTime => {
                2.0 * (2.0 * PI * u).sqrt() * (-(MAX_TERMS as f64 - 2.0).powi(2) / (2.0 * u)).exp()
            }
            Series::LargeTime => {
                (-(MAX_TERMS as f64).powi(2) * PI * PI * u / 2.0).exp() / (PI * u)
            }
        };
        return Err(Error::Accuracy {
            max_terms: MAX_TERMS,
            bound,
        });
    }
    let n = n + DERIV_MARGIN;
    let primary = match series {
        Series::SmallTime => std_density_small(u, w, n),
        Series::LargeTime => std_density_large(u, w, n),
    };
    if let Some(d) = primary {
        return Ok(d);
    }
    let fallback = match series {
        Series::SmallTime => std_density_large(u, w, MAX_TERMS),
        Series::LargeTime => std_density_small(u, w, MAX_TERMS),
    };
    fallback.ok_or(Error::Accuracy {
        max_terms: MAX_TERMS,
        bound: f64::NAN,
    })
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("time must be positive and finite, got {t}")))
    }
}

/// Distance fraction `w` from the exit boundary and the drift sign for `a`.
#[inline]
pub(crate) fn boundary_geometry(c: f64, a: Boundary) -> (f64, f64) {
    match a {
        Boundary::Lower => (c, -1.0),
        Boundary::Upper => (1.0 - c, 1.0),
    }
}

/// `ln g(a, t | b, c, d)`.
pub fn fpt_log_density(spec: &FptSpec, a: Boundary, t: f64) -> Result<f64> {
    spec.validate()?;
    check_time(t)?;
    let b2 = spec.b * spec.b;
    let (w, sign) = boundary_geometry(spec.c, a);
    let f = std_density(t / b2, w)?;
    Ok(-2.0 * spec.b.ln() + sign * spec.d * w * b2 - 0.5 * spec.d * spec.d * b2 * t + f.ln_f)
}

/// Sub-density `g(a, t)` of exiting through `a` at time `t`.
pub fn fpt_density(spec: &FptSpec, a: Boundary, t: f64) -> Result<f64> {
    fpt_log_density(spec, a, t).map(f64::exp)
}

/// `P(A = 1)`; closed-form ruin probability.
pub fn exit_probability(spec: &FptSpec) -> Result<f64> {
    spec.validate()?;
    Ok(upper_exit_prob(spec.b, spec.c, spec.d))
}

pub(crate) fn upper_exit_prob(b: f64, c: f64, d: f64) -> f64 {
    let kappa = -2.0 * d * b * b;
    if kappa == 0.0 {
        c
    } else if kappa > 1.0 {
        (kappa * (c - 1.0)).exp() * (-(-kappa * c).exp_m1()) / (-(-kappa).exp_m1())
    } else {
        (kappa * c).exp_m1() / kappa.exp_m1()
    }
}

/// `P(A = 1 | T = t)` together with a flag set when the sub-densities
/// degenerated and an analytic limit was returned instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmitProb {
    pub value: f64,
    pub degenerate: bool,
}

/// Log-odds of an upper exit given exit at `t`: `d·b² + ln f(u|1-c) - ln f(u|c)`.
pub(crate) fn admit_log_odds_parts(b: f64, c: f64, t: f64) -> Result<f64> {
    let u = t / (b * b);
    let up = std_density(u, 1.0 - c)?;
    let lo = std_density(u, c)?;
    Ok(up.ln_f - lo.ln_f)
}

pub fn conditional_admit_prob_detailed(spec: &FptSpec, t: f64) -> Result<AdmitProb> {
    spec.validate()?;
    check_time(t)?;
    let r = admit_log_odds_parts(spec.b, spec.c, t).ok();
    Ok(admit_from_parts(spec, t, r))
}

/// Admit probability from a precomputed `ln f(u|1-c) - ln f(u|c)`, or the
/// limiting value when that is unavailable or not finite.
pub(crate) fn admit_from_parts(spec: &FptSpec, t: f64, r: Option<f64>) -> AdmitProb {
    let b2 = spec.b * spec.b;
    let log_odds = r.map_or(f64::NAN, |r| spec.d * b2 + r);
    if log_odds.is_finite() {
        return AdmitProb {
            value: sigmoid(log_odds),
            degenerate: false,
        };
    }
    // The nearer boundary dominates as t -> 0; the slowest mode as t -> inf.
    let u = t / b2;
    let value = if u < 1.0 {
        if spec.c > 0.5 {
            1.0
        } else if spec.c < 0.5 {
            0.0
        } else {
            sigmoid(spec.d * b2)
        }
    } else {
        sigmoid(spec.d * b2)
    };
    AdmitProb {
        value,
        degenerate: true,
    }
}

/// `g(1,t) / (g(0,t) + g(1,t))`.
pub fn conditional_admit_prob(spec: &FptSpec, t: f64) -> Result<f64> {
    conditional_admit_prob_detailed(spec, t).map(|p| p.value)
}

/// `lim_{t -> inf} P(A = 1 | T = t) = sigmoid(d·b²)`.
pub fn admit_prob_long_time_limit(spec: &FptSpec) -> f64 {
    sigmoid(spec.d * spec.b * spec.b)
}

/// `E[T]`.
pub fn fpt_mean(spec: &FptSpec) -> Result<f64> {
    spec.validate()?;
    let (a, z, v) = (spec.b, spec.start(), spec.drift());
    let kappa = -2.0 * v * a;
    if kappa == 0.0 {
        return Ok(z * (a - z));
    }
    if kappa.abs() < 1e-4 {
        let s = -2.0 * v;
        let phi = kappa.exp_m1() / kappa;
        let corr = 1.0 + s * (z + a) / 3.0 + s * s * (z * z + z * a + a * a) / 12.0;
        return Ok(z * (a - z) * corr / phi);
    }
    let p1 = upper_exit_prob(spec.b, spec.c, spec.d);
    Ok((a * p1 - z) / v)
}

/// Time after which the remaining survival mass is below roughly `e^-40`.
pub fn negligible_tail_time(spec: &FptSpec) -> f64 {
    let v = spec.drift();
    let lambda1 = 0.5 * v * v + 0.5 * PI * PI / (spec.b * spec.b);
    let pref = (PI / (spec.b * spec.b * lambda1)).ln().max(0.0);
    (v.abs() * spec.b + 40.0 + pref) / lambda1
}

fn integrate_over_time<F: Fn(f64) -> f64>(spec: &FptSpec, f: F) -> f64 {
    let horizon = negligible_tail_time(spec);
    let scale = (spec.b * spec.b).min(horizon);
    let mut cuts = vec![0.0];
    let mut x = scale / 64.0;
    while x < horizon {
        cuts.push(x);
        x *= 4.0;
    }
    cuts.push(horizon);
    cuts.windows(2)
        .map(|w| quad::integrate(&f, w[0], w[1], 1e-14, 1e-12).0)
        .sum()
}

/// `∫ g(a, t) dt` by adaptive quadrature. Used by validity checks.
pub fn integrate_density(spec: &FptSpec, a: Boundary) -> Result<f64> {
    spec.validate()?;
    Ok(integrate_over_time(spec, |t| fpt_density(spec, a, t).unwrap_or(0.0)))
}

/// `E[T | A = a]` by quadrature; the per-boundary decomposition of
/// [`fpt_mean`].
pub fn fpt_mean_given_exit(spec: &FptSpec, a: Boundary) -> Result<f64> {
    spec.validate()?;
    let mass = integrate_over_time(spec, |t| fpt_density(spec, a, t).unwrap_or(0.0));
    let first = integrate_over_time(spec, |t| t * fpt_density(spec, a, t).unwrap_or(0.0));
    Ok(first / mass)
}

/// Joint CDF `P(A = a, T <= t)`.
pub fn fpt_cdf(spec: &FptSpec, a: Boundary, t: f64) -> Result<f64> {
    spec.validate()?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    if t == f64::INFINITY {
        let p1 = upper_exit_prob(spec.b, spec.c, spec.d);
        return Ok(if a == Boundary::Upper { p1 } else { 1.0 - p1 });
    }
    let s = match a {
        Boundary::Lower => *spec,
        Boundary::Upper => spec.reflected(),
    };
    Ok(lower_cdf(&s, t).clamp(0.0, 1.0))
}

/// `ln` of the CDF of the first hitting time of level `r > 0` by a Brownian
/// motion with drift `m`.
fn ln_hitting_cdf(t: f64, r: f64, m: f64) -> f64 {
    let sq = t.sqrt();
    log_add_exp(
        log_ndtr((m * t - r) / sq),
        2.0 * m * r + log_ndtr(-(m * t + r) / sq),
    )
}

fn lower_cdf(spec: &FptSpec, t: f64) -> f64 {
    let (a, z, v) = (spec.b, spec.start(), spec.drift());
    let u = t / (a * a);
    if u < 1.0 {
        let kmax = (20.0 * u).sqrt().ceil() as i64 + 1;
        let mut sum = 0.0;
        for k in -kmax..=kmax {
            let r = z + 2.0 * k as f64 * a;
            let lead = 2.0 * k as f64 * a * v;
            if r > 0.0 {
                sum += (lead + ln_hitting_cdf(t, r, -v)).exp();
            } else {
                sum -= (lead + ln_hitting_cdf(t, -r, v)).exp();
            }
        }
        sum
    } else {
        let p0 = 1.0 - upper_exit_prob(spec.b, spec.c, spec.d);
        let w = spec.c;
        let kmax = (80.0 / (PI * PI * u)).sqrt().ceil() as usize + 1;
        let ln_pref = (PI / (a * a)).ln() - v * z;
        let mut tail = 0.0;
        for k in 1..=kmax {
            let kf = k as f64;
            let lambda = 0.5 * v * v + 0.5 * kf * kf * PI * PI / (a * a);
            tail += kf * (kf * PI * w).sin() / lambda * (ln_pref - lambda * t).exp();
        }
        p0 - tail
    }
}

/// Draw `(A, T)` exactly: the boundary from the exit probability, then the
/// time by bisection on the conditional CDF.
pub fn sample_fpt<R: Rng + ?Sized>(spec: &FptSpec, rng: &mut R) -> Result<(Boundary, f64)> {
    let p1 = exit_probability(spec)?;
    let a = if rng.random::<f64>() < p1 {
        Boundary::Upper
    } else {
        Boundary::Lower
    };
    let mass = if a == Boundary::Upper { p1 } else { 1.0 - p1 };
    let target = rng.random::<f64>() * mass;
    let mut hi = fpt_mean(spec)?.max(1e-8);
    while fpt_cdf(spec, a, hi)? < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Accuracy {
                max_terms: MAX_TERMS,
                bound: target,
            });
        }
    }
    let mut lo = 0.0;
    while hi - lo > SAMPLER_TOL {
        let mid = 0.5 * (lo + hi);
        if fpt_cdf(spec, a, mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((a, 0.5 * (lo + hi)))
}
