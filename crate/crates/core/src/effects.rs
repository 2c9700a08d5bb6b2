//! Plug-in estimates of fixed-time and shifted-time decision and outcome
//! curves, with delta-method intervals.

use std::io::Write;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Pretreatment};
use crate::emfit::{delta_core, DeltaCi, FitResult};
use crate::error::{Error, Result};
use crate::fpt::{self, FptSpec};
use crate::latentmodel::{posterior_from_terms, row_terms, LatentModelParams, Tilt};
use crate::math::{par_map, par_sum_vec, sigmoid};

pub const DEFAULT_LEVEL: f64 = 0.95;

/// Shifted decision time `f(T) = max(T + delta, floor)`, both in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftPolicy {
    pub delta: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    5.0
}

impl ShiftPolicy {
    pub fn new(delta: f64, floor: f64) -> Result<Self> {
        let p = ShiftPolicy { delta, floor };
        p.validate()?;
        Ok(p)
    }

    pub fn with_delta(delta: f64) -> Result<Self> {
        Self::new(delta, default_floor())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor.is_finite()) || !self.delta.is_finite() {
            return Err(Error::Config(format!(
                "shift policy needs a finite delta and a positive floor, got delta={} floor={}",
                self.delta, self.floor
            )));
        }
        Ok(())
    }

    /// The zero-delta policy with the same floor.
    pub fn reference(&self) -> ShiftPolicy {
        ShiftPolicy {
            delta: 0.0,
            floor: self.floor,
        }
    }

    /// Shifted time in hours for an observed time in hours.
    pub fn apply(&self, t_hours: f64) -> f64 {
        (t_hours + self.delta / 60.0).max(self.floor / 60.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Theta,
    Gamma,
    Err0,
    Err1,
    ErrTotal,
    ThetaShift,
    GammaShift,
}

/// Which `H` weights enter a shift estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// E-step posterior given all observed variables of the row.
    #[default]
    FullPosterior,
    /// Weights given `(X, Z)` only.
    Pretreatment,
}

/// A curve over a time grid with pointwise intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveResult {
    pub estimand: Estimand,
    /// Estimator that produced the curve.
    pub estimator: String,
    pub level: f64,
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Grid points where some row fell back to a limiting admit probability.
    pub degenerate: Vec<bool>,
    pub pseudo_inverse: bool,
}

impl CurveResult {
    pub(crate) fn from_cis(
        estimand: Estimand,
        estimator: &str,
        level: f64,
        grid: &[f64],
        cis: &[DeltaCi],
        degenerate: Vec<bool>,
    ) -> Self {
        CurveResult {
            estimand,
            estimator: estimator.to_string(),
            level,
            grid: grid.to_vec(),
            estimate: cis.iter().map(|c| c.estimate).collect(),
            se: cis.iter().map(|c| c.se).collect(),
            ci_low: cis.iter().map(|c| c.lower.clamp(0.0, c.estimate)).collect(),
            ci_high: cis.iter().map(|c| c.upper.clamp(c.estimate, 1.0)).collect(),
            degenerate,
            pseudo_inverse: cis.iter().any(|c| c.pseudo_inverse),
        }
    }

    /// CSV with columns `t, estimate, se, lo, hi`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "estimate", "se", "lo", "hi"])?;
        for j in 0..self.grid.len() {
            wr.write_record([
                self.grid[j].to_string(),
                self.estimate[j].to_string(),
                self.se[j].to_string(),
                self.ci_low[j].to_string(),
                self.ci_high[j].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `0.1, 0.2, ..., 10` hours.
pub fn default_grid() -> Vec<f64> {
    (1..=100).map(|i| i as f64 / 10.0).collect()
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Domain("time grid is empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Domain(format!("grid times must be positive and finite, got {t}")));
    }
    Ok(())
}

/// `(ω_i(0), ω_i(1))` with `ω_i(h) ∝ P(H = h | x_i) P(z_i | x_i, h)`.
pub fn pretreatment_weights(params: &LatentModelParams, view: Pretreatment<'_>) -> Result<Vec<[f64; 2]>> {
    par_map(view.n(), |i| {
        let (x, z) = view.row(i);
        let w1 = posterior_from_terms(params.pretreatment_terms(x, z));
        Ok([1.0 - w1, w1])
    })
}

/// Outcome probabilities `P(Y = 1 | A = a, T, H = h)` and the admit
/// log-odds offset implied by a tilt. Without a tilt these are the cell
/// probabilities and zero.
fn outcome_terms(p: &LatentModelParams, tilt: Option<&Tilt>, h: u8) -> ([f64; 2], f64) {
    let pi = [p.cell_prob(h, 0), p.cell_prob(h, 1)];
    match tilt {
        None => (pi, 0.0),
        Some(t) => {
            let psi = [t.psi0, t.psi1];
            let m = [1.0 + (psi[0] - 1.0) * pi[0], 1.0 + (psi[1] - 1.0) * pi[1]];
            ([psi[0] * pi[0] / m[0], psi[1] * pi[1] / m[1]], m[1].ln() - m[0].ln())
        }
    }
}

/// Evaluation times: one shared grid, or one time per row and column.
enum Times {
    Grid(Vec<f64>),
    PerRow { m: usize, values: Vec<f64> },
}

impl Times {
    fn m(&self) -> usize {
        match self {
            Times::Grid(g) => g.len(),
            Times::PerRow { m, .. } => *m,
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        match self {
            Times::Grid(g) => g[j],
            Times::PerRow { m, values } => values[i * m + j],
        }
    }
}

/// Sums needed by every estimand at each of the `m` time columns.
struct Sums {
    m: usize,
    v: Vec<f64>,
}

impl Sums {
    const PER: usize = 4;
    fn theta(&self, j: usize) -> f64 {
        self.v[j * Self::PER]
    }
    fn gamma(&self, j: usize) -> f64 {
        self.v[j * Self::PER + 1]
    }
    fn err0_num(&self, j: usize) -> f64 {
        self.v[j * Self::PER + 2]
    }
    fn err1_num(&self, j: usize) -> f64 {
        self.v[j * Self::PER + 3]
    }
    fn weight(&self, h: usize) -> f64 {
        self.v[self.m * Self::PER + h]
    }
}

type Parts = Arc<Vec<Option<f64>>>;

/// Row-by-time evaluator. The expensive density ratio depends only on the
/// threshold links, so it is cached by the `(beta_b, beta_c)` values; most
/// coordinates perturbed by the delta method reuse it.
struct Engine<'a> {
    ds: &'a Dataset,
    times: Times,
    tilt: Option<Tilt>,
    mode: WeightMode,
    cache: Mutex<Vec<(Vec<f64>, Parts)>>,
}

fn threshold_key(p: &LatentModelParams) -> Vec<f64> {
    p.beta_b.iter().chain(&p.beta_c).copied().collect()
}

impl<'a> Engine<'a> {
    fn new(ds: &'a Dataset, times: Times, tilt: Option<Tilt>, mode: WeightMode) -> Self {
        Engine {
            ds,
            times,
            tilt: tilt.filter(|t| !t.is_neutral()),
            mode,
            cache: Mutex::new(Vec::new()),
        }
    }

    fn parts(&self, p: &LatentModelParams) -> Result<Parts> {
        let key = threshold_key(p);
        if let Some((_, v)) = self.cache.lock().expect("cache lock").iter().find(|(k, _)| *k == key) {
            return Ok(v.clone());
        }
        let m = self.times.m();
        let rows = par_map(self.ds.n(), |i| {
            let row = self.ds.row(i);
            let b = p.log_b(row.x).exp();
            let c = sigmoid(p.logit_c(row.x, row.z));
            Ok((0..m)
                .map(|j| fpt::admit_log_odds_parts(b, c, self.times.at(i, j)).ok())
                .collect::<Vec<_>>())
        })?;
        let v: Parts = Arc::new(rows.into_iter().flatten().collect());
        let mut cache = self.cache.lock().expect("cache lock");
        // slot 0 keeps the first (base) entry, slot 1 the latest perturbation
        if cache.len() == 2 {
            cache.pop();
        }
        cache.push((key, v.clone()));
        Ok(v)
    }

    fn weights(&self, p: &LatentModelParams, i: usize) -> Result<[f64; 2]> {
        let row = self.ds.row(i);
        let w1 = match self.mode {
            WeightMode::Pretreatment => posterior_from_terms(p.pretreatment_terms(row.x, row.z)),
            WeightMode::FullPosterior => posterior_from_terms(row_terms(p, &row, self.tilt.as_ref())?),
        };
        Ok([1.0 - w1, w1])
    }

    fn sums(&self, p: &LatentModelParams) -> Result<(Sums, Vec<bool>)> {
        let parts = self.parts(p)?;
        let m = self.times.m();
        let d = p.drifts();
        let terms = [outcome_terms(p, self.tilt.as_ref(), 0), outcome_terms(p, self.tilt.as_ref(), 1)];
        let dim = m * Sums::PER + 2;
        let v = par_sum_vec(self.ds.n(), dim, |i, acc| {
            let row = self.ds.row(i);
            let b = p.log_b(row.x).exp();
            let c = sigmoid(p.logit_c(row.x, row.z));
            let w = self.weights(p, i)?;
            for j in 0..m {
                let t = self.times.at(i, j);
                let r = parts[i * m + j];
                let mut pa = [0.0; 2];
                for h in 0..2 {
                    let (pi, offset) = terms[h];
                    let spec = FptSpec { b, c, d: d[h] };
                    pa[h] = fpt::admit_from_parts(&spec, t, r.map(|r| r + offset)).value;
                    acc[j * Sums::PER] += w[h] * pa[h];
                    acc[j * Sums::PER + 1] += w[h] * (pi[1] * pa[h] + pi[0] * (1.0 - pa[h]));
                }
                acc[j * Sums::PER + 2] += w[0] * pa[0];
                acc[j * Sums::PER + 3] += w[1] * (1.0 - pa[1]);
            }
            acc[m * Sums::PER] += w[0];
            acc[m * Sums::PER + 1] += w[1];
            Ok(())
        })?;
        let degenerate = (0..m)
            .map(|j| (0..self.ds.n()).any(|i| parts[i * m + j].is_none()))
            .collect();
        Ok((Sums { m, v }, degenerate))
    }
}

/// All fixed-time curves from one delta-method pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub theta: CurveResult,
    pub gamma: CurveResult,
    pub err0: CurveResult,
    pub err1: CurveResult,
    pub err_total: CurveResult,
}

fn fixed_time_values(s: &Sums, n: f64) -> Result<Vec<f64>> {
    let m = s.m;
    for h in 0..2 {
        if !(s.weight(h) > 0.0) {
            return Err(Error::StratumEmpty(h as u8));
        }
    }
    let mut out = Vec::with_capacity(5 * m);
    out.extend((0..m).map(|j| s.theta(j) / n));
    out.extend((0..m).map(|j| s.gamma(j) / n));
    out.extend((0..m).map(|j| s.err0_num(j) / s.weight(0)));
    out.extend((0..m).map(|j| s.err1_num(j) / s.weight(1)));
    out.extend((0..m).map(|j| (s.err0_num(j) + s.err1_num(j)) / n));
    Ok(out)
}

/// `θ(t)`, `γ(t)` and the error curves with `(X, Z)`-only weights.
pub fn curves(fit: &FitResult, ds: &Dataset, grid: &[f64], level: f64) -> Result<CurveSet> {
    check_grid(grid)?;
    fit.params.check_schema(ds.schema())?;
    let engine = Engine::new(ds, Times::Grid(grid.to_vec()), fit.tilt, WeightMode::Pretreatment);
    let n = ds.n() as f64;
    let (_, degenerate) = engine.sums(&fit.params)?;
    let template = &fit.params;
    let cis = delta_core(
        &fit.theta(),
        &fit.info,
        |v| {
            let p = template.with_values(v)?;
            fixed_time_values(&engine.sums(&p)?.0, n)
        },
        level,
    )?;
    let m = grid.len();
    let make = |e: Estimand, block: usize| {
        CurveResult::from_cis(e, "latent_brownian", level, grid, &cis[block * m..(block + 1) * m], degenerate.clone())
    };
    Ok(CurveSet {
        theta: make(Estimand::Theta, 0),
        gamma: make(Estimand::Gamma, 1),
        err0: make(Estimand::Err0, 2),
        err1: make(Estimand::Err1, 3),
        err_total: make(Estimand::ErrTotal, 4),
    })
}

pub fn theta_curve(fit: &FitResult, ds: &Dataset, grid: &[f64]) -> Result<CurveResult> {
    Ok(curves(fit, ds, grid, DEFAULT_LEVEL)?.theta)
}

pub fn gamma_curve(fit: &FitResult, ds: &Dataset, grid: &[f64]) -> Result<CurveResult> {
    Ok(curves(fit, ds, grid, DEFAULT_LEVEL)?.gamma)
}

/// `(err0, err1, err_total)`.
pub fn error_curves(fit: &FitResult, ds: &Dataset, grid: &[f64]) -> Result<(CurveResult, CurveResult, CurveResult)> {
    let s = curves(fit, ds, grid, DEFAULT_LEVEL)?;
    Ok((s.err0, s.err1, s.err_total))
}

/// Point values of every fixed-time estimand at `params`, without intervals.
/// Order: theta, gamma, err0, err1, err_total, each over the grid.
pub fn curve_point_values(
    params: &LatentModelParams,
    ds: &Dataset,
    grid: &[f64],
    tilt: Option<Tilt>,
) -> Result<Vec<f64>> {
    check_grid(grid)?;
    let engine = Engine::new(ds, Times::Grid(grid.to_vec()), tilt, WeightMode::Pretreatment);
    fixed_time_values(&engine.sums(params)?.0, ds.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub policy: ShiftPolicy,
    pub theta: DeltaCi,
    pub gamma: DeltaCi,
    /// Difference against the zero-delta policy with the same floor.
    pub theta_diff: DeltaCi,
    pub gamma_diff: DeltaCi,
}

/// Shift estimates keyed by the policy's delta in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub weight_mode: WeightMode,
    pub level: f64,
    pub by_delta: IndexMap<String, ShiftEstimate>,
}

/// `θ̂(f)` and `γ̂(f)` for each policy with delta-method intervals, plus
/// differences against the policy with zero delta.
pub fn shift_estimates(
    fit: &FitResult,
    ds: &Dataset,
    policies: &[ShiftPolicy],
    mode: WeightMode,
    level: f64,
) -> Result<ShiftReport> {
    if policies.is_empty() {
        return Err(Error::Config("no shift policies given".into()));
    }
    for p in policies {
        p.validate()?;
    }
    fit.params.check_schema(ds.schema())?;
    // columns: each policy, then its reference
    let k = policies.len();
    let m = 2 * k;
    let mut values = Vec::with_capacity(ds.n() * m);
    for &t in ds.t() {
        values.extend(policies.iter().map(|p| p.apply(t)));
        values.extend(policies.iter().map(|p| p.reference().apply(t)));
    }
    let engine = Engine::new(ds, Times::PerRow { m, values }, fit.tilt, mode);
    let n = ds.n() as f64;
    let template = &fit.params;
    let cis = delta_core(
        &fit.theta(),
        &fit.info,
        |v| {
            let p = template.with_values(v)?;
            let s = engine.sums(&p)?.0;
            let mut out = Vec::with_capacity(4 * k);
            for j in 0..k {
                let (th, ga) = (s.theta(j) / n, s.gamma(j) / n);
                let (th0, ga0) = (s.theta(k + j) / n, s.gamma(k + j) / n);
                out.extend([th, ga, th - th0, ga - ga0]);
            }
            Ok(out)
        },
        level,
    )?;
    let mut by_delta = IndexMap::new();
    for (j, p) in policies.iter().enumerate() {
        let key = p.delta.to_string();
        let est = ShiftEstimate {
            policy: *p,
            theta: cis[4 * j],
            gamma: cis[4 * j + 1],
            theta_diff: cis[4 * j + 2],
            gamma_diff: cis[4 * j + 3],
        };
        if by_delta.insert(key.clone(), est).is_some() {
            return Err(Error::Config(format!("duplicate shift delta {key}")));
        }
    }
    Ok(ShiftReport {
        weight_mode: mode,
        level,
        by_delta,
    })
}

/// Shift estimates at `params` without intervals: `(θ̂(f), γ̂(f))` per policy.
pub fn shift_point_values(
    params: &LatentModelParams,
    ds: &Dataset,
    policies: &[ShiftPolicy],
    mode: WeightMode,
    tilt: Option<Tilt>,
) -> Result<Vec<[f64; 2]>> {
    let m = policies.len();
    let mut values = Vec::with_capacity(ds.n() * m);
    for &t in ds.t() {
        values.extend(policies.iter().map(|p| p.apply(t)));
    }
    let engine = Engine::new(ds, Times::PerRow { m, values }, tilt, mode);
    let s = engine.sums(params)?.0;
    let n = ds.n() as f64;
    Ok((0..m).map(|j| [s.theta(j) / n, s.gamma(j) / n]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnKind, ColumnSchema, ColumnSpec};
    use crate::emfit::{fit, FitControls, FitInit};
    use crate::math::logit;
    use crate::simlab::{reference_scenario, simulate_dataset};
    use nalgebra::DMatrix;

    fn schema() -> ColumnSchema {
        ColumnSchema {
            x: vec![ColumnSpec::new("x1", ColumnKind::Continuous)],
            z: vec![ColumnSpec::new("z1", ColumnKind::Binary)],
            t: "t".into(),
            a: "a".into(),
            y: "y".into(),
        }
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) - 0.5).collect();
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let t: Vec<f64> = (0..n).map(|i| 0.2 + 0.05 * i as f64).collect();
        let a: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let y: Vec<u8> = (0..n).map(|i| (i % 4 == 0) as u8).collect();
        Dataset::from_columns(schema(), x, z, t, a, y).unwrap()
    }

    fn fixed_fit(params: LatentModelParams) -> FitResult {
        let q = params.n_params();
        FitResult {
            params,
            loglik: 0.0,
            loglik_trace: vec![],
            info: DMatrix::identity(q, q) * 1e4,
            converged: true,
            iterations: 0,
            se: vec![0.01; q],
            start: 0,
            warnings: vec![],
            tilt: None,
        }
    }

    fn symmetric_params() -> LatentModelParams {
        let mut p = LatentModelParams::for_schema(&schema());
        // d0 = -1, d1 = +1
        p.delta = [0.0, 0.0];
        p
    }

    #[test]
    fn policy_rule() {
        let p = ShiftPolicy::with_delta(-30.0).unwrap();
        assert!((p.apply(1.0) - 0.5).abs() < 1e-15);
        assert!((p.apply(0.2) - 5.0 / 60.0).abs() < 1e-15);
        assert!(ShiftPolicy::new(0.0, 0.0).is_err());
    }

    #[test]
    fn symmetric_construction_gives_one_half_and_equal_errors() {
        let ds = tiny_dataset(12);
        let fit = fixed_fit(symmetric_params());
        let s = curves(&fit, &ds, &[0.1, 0.5, 2.0], 0.95).unwrap();
        for j in 0..3 {
            assert!((s.theta.estimate[j] - 0.5).abs() < 1e-12);
            assert!((s.err0.estimate[j] - s.err1.estimate[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn outcome_free_of_decision_gives_constant_gamma() {
        let ds = tiny_dataset(10);
        let mut p = symmetric_params();
        p.delta = [0.2, 0.4];
        p.cells = [logit(0.3); 4];
        let s = curves(&fixed_fit(p.clone()), &ds, &[0.3, 1.0], 0.95).unwrap();
        for g in &s.gamma.estimate {
            assert!((g - 0.3).abs() < 1e-12);
        }
        p.cells = [logit(1e-10), logit(1e-10), logit(1.0 - 1e-10), logit(1.0 - 1e-10)];
        let s = curves(&fixed_fit(p), &ds, &[0.3, 1.0], 0.95).unwrap();
        for j in 0..2 {
            assert!((s.gamma.estimate[j] - s.theta.estimate[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn total_error_is_weighted_mixture() {
        let ds = tiny_dataset(15);
        let mut p = symmetric_params();
        p.delta = [0.3, 0.5];
        p.eta_h = vec![0.4, 0.8];
        let s = curves(&fixed_fit(p.clone()), &ds, &[0.2, 0.8, 3.0], 0.95).unwrap();
        let w = pretreatment_weights(&p, ds.pretreatment()).unwrap();
        let n = ds.n() as f64;
        let s1: f64 = w.iter().map(|w| w[1]).sum::<f64>() / n;
        for j in 0..3 {
            let mix = (1.0 - s1) * s.err0.estimate[j] + s1 * s.err1.estimate[j];
            assert!((mix - s.err_total.estimate[j]).abs() < 1e-12);
            assert!(s.theta.ci_low[j] <= s.theta.estimate[j] && s.theta.estimate[j] <= s.theta.ci_high[j]);
        }
    }

    #[test]
    fn mixture_of_per_class_curves() {
        let ds = tiny_dataset(9);
        let mut p = symmetric_params();
        p.delta = [-0.2, 0.6];
        p.eta_h = vec![-0.3, 1.0];
        let grid = [0.25, 1.5];
        let v = curve_point_values(&p, &ds, &grid, None).unwrap();
        let w = pretreatment_weights(&p, ds.pretreatment()).unwrap();
        for (j, &t) in grid.iter().enumerate() {
            let mut direct = 0.0;
            for i in 0..ds.n() {
                let links = crate::latentmodel::links_for_row(&p, &ds.row(i)).unwrap();
                for h in 0..2u8 {
                    direct += w[i][h as usize] * fpt::conditional_admit_prob(&links.spec(h), t).unwrap();
                }
            }
            assert!((direct / ds.n() as f64 - v[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_prior_gives_class_one_weights() {
        let ds = tiny_dataset(5);
        let mut p = symmetric_params();
        p.eta_h = vec![800.0, 0.0];
        let w = pretreatment_weights(&p, ds.pretreatment()).unwrap();
        assert!(w.iter().all(|w| w[0] == 0.0 && w[1] == 1.0));
    }

    #[test]
    fn empty_stratum_is_reported() {
        let ds = tiny_dataset(5);
        let mut p = symmetric_params();
        p.eta_h = vec![800.0, 0.0];
        assert!(matches!(
            curves(&fixed_fit(p), &ds, &[1.0], 0.95),
            Err(Error::StratumEmpty(0))
        ));
    }

    #[test]
    fn zero_shift_has_zero_difference_and_matches_direct_sum() {
        let ds = tiny_dataset(14);
        let mut p = symmetric_params();
        p.delta = [0.1, 0.3];
        p.eta_h = vec![0.2, -0.5];
        let fit = fixed_fit(p.clone());
        let pol = ShiftPolicy::with_delta(0.0).unwrap();
        let r = shift_estimates(&fit, &ds, &[pol], WeightMode::Pretreatment, 0.95).unwrap();
        let e = r.by_delta["0"];
        assert_eq!(e.theta_diff.estimate, 0.0);
        assert_eq!(e.theta_diff.se, 0.0);
        let w = pretreatment_weights(&p, ds.pretreatment()).unwrap();
        let mut direct = 0.0;
        for i in 0..ds.n() {
            let links = crate::latentmodel::links_for_row(&p, &ds.row(i)).unwrap();
            for h in 0..2u8 {
                direct += w[i][h as usize] * fpt::conditional_admit_prob(&links.spec(h), pol.apply(ds.t()[i])).unwrap();
            }
        }
        assert!((direct / ds.n() as f64 - e.theta.estimate).abs() < 1e-12);
    }

    #[test]
    fn huge_shift_reaches_long_time_limit() {
        let ds = tiny_dataset(8);
        let mut p = symmetric_params();
        p.delta = [0.1, 0.3];
        let pol = ShiftPolicy::with_delta(1e6).unwrap();
        let v = shift_point_values(&p, &ds, &[pol], WeightMode::FullPosterior, None).unwrap();
        let mut lim = 0.0;
        for i in 0..ds.n() {
            let row = ds.row(i);
            let w1 = posterior_from_terms(row_terms(&p, &row, None).unwrap());
            let links = crate::latentmodel::links_for_row(&p, &row).unwrap();
            lim += (1.0 - w1) * fpt::admit_prob_long_time_limit(&links.spec(0))
                + w1 * fpt::admit_prob_long_time_limit(&links.spec(1));
        }
        assert!((v[0][0] - lim / ds.n() as f64).abs() < 1e-9);
    }

    #[test]
    fn curves_from_a_fit_are_bounded() {
        let (ds, _) = simulate_dataset(&reference_scenario(400, 2)).unwrap();
        let controls = FitControls {
            n_starts: 1,
            ..FitControls::default()
        };
        let f = fit(&ds, FitInit::Random, &controls).unwrap();
        let s = curves(&f, &ds, &[0.1, 0.5, 1.0, 3.0], 0.95).unwrap();
        for c in [&s.theta, &s.gamma, &s.err0, &s.err1, &s.err_total] {
            for j in 0..c.grid.len() {
                assert!((0.0..=1.0).contains(&c.estimate[j]));
                assert!(c.ci_low[j] <= c.estimate[j] && c.estimate[j] <= c.ci_high[j]);
            }
        }
    }
}
