//! Small numeric helpers shared across the crate.
//!
//! Reductions over rows go through [`par_sum`] / [`par_sum_vec`], which split
//! the index range into fixed-size chunks and combine the chunk totals with a
//! pairwise sum. The chunk layout does not depend on the worker count, so the
//! totals are bit-identical for any `--threads` setting.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::Result;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows per reduction chunk.
pub(crate) const CHUNK: usize = 256;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`, stable for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Bernoulli log-probability of `y` under probability `sigmoid(eta)`.
#[inline]
pub fn bernoulli_logit_ll(y: bool, eta: f64) -> f64 {
    if y {
        log_sigmoid(eta)
    } else {
        log_sigmoid(-eta)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn chunk_bounds(n: usize) -> impl IndexedParallelIterator<Item = (usize, usize)> {
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(move |c| (c * CHUNK, ((c + 1) * CHUNK).min(n)))
}

/// Deterministic parallel sum of `f(i)` for `i in 0..n`.
pub(crate) fn par_sum<F>(n: usize, f: F) -> Result<f64>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let partial: Vec<f64> = chunk_bounds(n)
        .map(|(lo, hi)| {
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i)?;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&partial))
}

/// Deterministic parallel sum of vector contributions; `f(i, acc)` adds row
/// `i`'s contribution into `acc`.
pub(crate) fn par_sum_vec<F>(n: usize, dim: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let partial: Vec<Vec<f64>> = chunk_bounds(n)
        .map(|(lo, hi)| {
            let mut acc = vec![0.0; dim];
            for i in lo..hi {
                f(i, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; dim];
    let mut col = vec![0.0; partial.len()];
    for (j, o) in out.iter_mut().enumerate() {
        for (c, p) in col.iter_mut().zip(&partial) {
            *c = p[j];
        }
        *o = pairwise_sum(&col);
    }
    Ok(out)
}

/// Order-preserving parallel map over `0..n`.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    (0..n).into_par_iter().map(&f).collect()
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `ln Phi(x)` for the standard normal CDF, accurate far into the lower tail.
pub fn log_ndtr(x: f64) -> f64 {
    if x > -30.0 {
        (0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
            + 105.0 / (x2 * x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * LN_2PI + series.ln()
    }
}

/// Central finite-difference step used throughout: `rel * max(1, |x|)`.
#[inline]
pub fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}
