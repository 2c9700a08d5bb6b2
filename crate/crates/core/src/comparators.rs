//! Alternative estimators: a generalized-propensity-score dose response, a
//! latent model with a lognormal decision time, and variants of the
//! Brownian and lognormal models without the latent class.
//!
//! Lognormal densities use the parametrization `log T ~ N(m + σ²/2, σ²)`,
//! where `m` is the linear predictor.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, ColumnSchema, Dataset};
use crate::effects::{check_grid, CurveResult, Estimand};
use crate::emfit::{
    cell_update, delta_core, numeric_information, oakes_generic, pretreatment_update, random_start, run_em,
    standard_errors, threshold_q, threshold_update, threshold_vec, EmModel, EmRun, FitControls, MStep,
};
use crate::error::{Error, Result};
use crate::fpt::{self, FptSpec};
use crate::latentmodel::{
    add_pretreatment_gradient, cell_index, posterior_from_terms, LatentModelParams, ParamDoc, ZModel, CELL_NAMES,
};
use crate::math::{bernoulli_logit_ll, dot, log_add_exp, log_sigmoid, par_map, par_sum, par_sum_vec, sigmoid, LN_2PI};
use crate::optim::{weighted_least_squares, weighted_logistic};

/// Log-density of `T = t` when `log T ~ N(m + σ²/2, σ²)`.
#[inline]
pub fn lognormal_log_density(t: f64, m: f64, sigma: f64) -> f64 {
    let l = t.ln();
    let r = l - m - 0.5 * sigma * sigma;
    -l - sigma.ln() - 0.5 * LN_2PI - r * r / (2.0 * sigma * sigma)
}

// ---------------------------------------------------------------------------
// Generalized propensity score

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsParams {
    /// `[intercept, x, z]` for `W = log E[T | x, z]`.
    pub beta: Vec<f64>,
    pub sigma: f64,
    /// `logit ψ(1 | t, r)` on `[1, r, r², t, t²]`.
    pub alpha: Vec<f64>,
    /// `logit φ(1 | a, t, r)` on `[1, r, r², t, t², a, a·r, a·t]`.
    pub gamma: Vec<f64>,
}

pub const GPS_ALPHA_LEN: usize = 5;
pub const GPS_GAMMA_LEN: usize = 8;

impl GpsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::ParamDomain(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.alpha.len() != GPS_ALPHA_LEN || self.gamma.len() != GPS_GAMMA_LEN {
            return Err(Error::Shape("alpha needs 5 and gamma 8 coefficients".into()));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::ParamDomain("GPS parameters must be finite".into()));
        }
        Ok(())
    }

    /// `beta, log sigma, alpha, gamma`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.push(self.sigma.ln());
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.gamma);
        v
    }

    pub fn with_values(&self, v: &[f64]) -> Result<Self> {
        let nb = self.beta.len();
        if v.len() != nb + 1 + GPS_ALPHA_LEN + GPS_GAMMA_LEN {
            return Err(Error::Shape("GPS parameter vector has the wrong length".into()));
        }
        Ok(GpsParams {
            beta: v[..nb].to_vec(),
            sigma: v[nb].exp(),
            alpha: v[nb + 1..nb + 1 + GPS_ALPHA_LEN].to_vec(),
            gamma: v[nb + 1 + GPS_ALPHA_LEN..].to_vec(),
        })
    }

    #[inline]
    fn w(&self, x: &[f64], z: &[f64]) -> f64 {
        let k = x.len();
        self.beta[0] + dot(&self.beta[1..=k], x) + dot(&self.beta[k + 1..], z)
    }

    /// Generalized propensity score: the fitted density of `T` at `t`.
    pub fn score(&self, t: f64, x: &[f64], z: &[f64]) -> f64 {
        lognormal_log_density(t, self.w(x, z), self.sigma).exp()
    }

    /// `ψ(1 | t, r)`.
    pub fn admit_prob(&self, t: f64, r: f64) -> f64 {
        sigmoid(dot(&self.alpha, &alpha_features(t, r)))
    }

    /// `φ(1 | a, t, r)`.
    pub fn outcome_prob(&self, a: u8, t: f64, r: f64) -> f64 {
        sigmoid(dot(&self.gamma, &gamma_features(a, t, r)))
    }

    /// `l(t, r) = Σ_a φ(1 | a, t, r) ψ(a | t, r)`.
    pub fn outcome_response(&self, t: f64, r: f64) -> f64 {
        let p = self.admit_prob(t, r);
        self.outcome_prob(1, t, r) * p + self.outcome_prob(0, t, r) * (1.0 - p)
    }
}

fn alpha_features(t: f64, r: f64) -> [f64; GPS_ALPHA_LEN] {
    [1.0, r, r * r, t, t * t]
}

fn gamma_features(a: u8, t: f64, r: f64) -> [f64; GPS_GAMMA_LEN] {
    let af = a as f64;
    [1.0, r, r * r, t, t * t, af, af * r, af * t]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsFit {
    pub params: GpsParams,
    pub loglik: f64,
    /// Block-diagonal information: stage one, then the two logistic models.
    #[serde(skip)]
    pub info: DMatrix<f64>,
    pub se: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

fn xz_design(ds: &Dataset) -> Vec<f64> {
    let mut d = Vec::with_capacity(ds.n() * (1 + ds.k() + ds.p()));
    for i in 0..ds.n() {
        let r = ds.row(i);
        d.push(1.0);
        d.extend_from_slice(r.x);
        d.extend_from_slice(r.z);
    }
    d
}

fn gps_stage1_loglik_grad(ds: &Dataset, beta: &[f64], log_sigma: f64) -> Result<Vec<f64>> {
    let s2 = (2.0 * log_sigma).exp();
    let nb = beta.len();
    par_sum_vec(ds.n(), nb + 1, |i, acc| {
        let row = ds.row(i);
        let k = row.x.len();
        let m = beta[0] + dot(&beta[1..=k], row.x) + dot(&beta[k + 1..], row.z);
        let r = row.t.ln() - m - 0.5 * s2;
        let g = r / s2;
        acc[0] += g;
        for (o, v) in acc[1..=k].iter_mut().zip(row.x) {
            *o += g * v;
        }
        for (o, v) in acc[k + 1..nb].iter_mut().zip(row.z) {
            *o += g * v;
        }
        acc[nb] += -1.0 + r * r / s2 + r;
        Ok(())
    })
}

fn logistic_information(design: &[f64], ncol: usize, coef: &[f64]) -> DMatrix<f64> {
    let mut info = DMatrix::<f64>::zeros(ncol, ncol);
    for row in design.chunks_exact(ncol) {
        let p = sigmoid(dot(row, coef));
        let w = p * (1.0 - p);
        for a in 0..ncol {
            for b in 0..=a {
                info[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..ncol {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    info
}

/// Two-stage GPS fit: lognormal regression of `T` on `(X, Z)`, then
/// logistic models for `A` given `(t, r)` and `Y` given `(a, t, r)`.
pub fn gps_fit(ds: &Dataset) -> Result<GpsFit> {
    let n = ds.n();
    let ncol = 1 + ds.k() + ds.p();
    let design = xz_design(ds);
    let logt: Vec<f64> = ds.t().iter().map(|t| t.ln()).collect();
    let ones = vec![1.0; n];
    let c = weighted_least_squares(&design, ncol, &logt, &ones)
        .map_err(|e| Error::Fitting(format!("gps stage 1: {e}")))?;
    let rss: f64 = design
        .chunks_exact(ncol)
        .zip(&logt)
        .map(|(row, l)| (l - dot(row, &c)).powi(2))
        .sum();
    let sigma = (rss / n as f64).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::Fitting("gps stage 1: zero residual variance".into()));
    }
    let mut beta = c;
    beta[0] -= 0.5 * sigma * sigma;

    let mut params = GpsParams {
        beta,
        sigma,
        alpha: vec![0.0; GPS_ALPHA_LEN],
        gamma: vec![0.0; GPS_GAMMA_LEN],
    };
    let r: Vec<f64> = (0..n)
        .map(|i| {
            let row = ds.row(i);
            params.score(row.t, row.x, row.z)
        })
        .collect();
    let mut da = Vec::with_capacity(n * GPS_ALPHA_LEN);
    let mut dg = Vec::with_capacity(n * GPS_GAMMA_LEN);
    for i in 0..n {
        da.extend_from_slice(&alpha_features(ds.t()[i], r[i]));
        dg.extend_from_slice(&gamma_features(ds.a()[i], ds.t()[i], r[i]));
    }
    let a: Vec<f64> = ds.a().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = ds.y().iter().map(|&v| v as f64).collect();
    let fa = weighted_logistic(&da, GPS_ALPHA_LEN, &a, &ones, None)
        .map_err(|e| Error::Fitting(format!("gps stage 2 (decision): {e}")))?;
    let fg = weighted_logistic(&dg, GPS_GAMMA_LEN, &y, &ones, None)
        .map_err(|e| Error::Fitting(format!("gps stage 2 (outcome): {e}")))?;
    let mut warnings = Vec::new();
    if fa.ridge_used || fg.ridge_used {
        warnings.push("gps stage 2: ridge fallback used".into());
    }
    params.alpha = fa.coef;
    params.gamma = fg.coef;

    let i1 = numeric_information(&[params.beta.clone(), vec![params.sigma.ln()]].concat(), |v| {
        gps_stage1_loglik_grad(ds, &v[..ncol], v[ncol])
    })?;
    let i2 = logistic_information(&da, GPS_ALPHA_LEN, &params.alpha);
    let i3 = logistic_information(&dg, GPS_GAMMA_LEN, &params.gamma);
    let q = ncol + 1 + GPS_ALPHA_LEN + GPS_GAMMA_LEN;
    let mut info = DMatrix::<f64>::zeros(q, q);
    info.view_mut((0, 0), (ncol + 1, ncol + 1)).copy_from(&i1);
    info.view_mut((ncol + 1, ncol + 1), (GPS_ALPHA_LEN, GPS_ALPHA_LEN)).copy_from(&i2);
    let o = ncol + 1 + GPS_ALPHA_LEN;
    info.view_mut((o, o), (GPS_GAMMA_LEN, GPS_GAMMA_LEN)).copy_from(&i3);

    let loglik = (0..n)
        .map(|i| {
            let row = ds.row(i);
            lognormal_log_density(row.t, params.w(row.x, row.z), params.sigma)
                + bernoulli_logit_ll(row.a == 1, dot(&params.alpha, &alpha_features(row.t, r[i])))
                + bernoulli_logit_ll(row.y == 1, dot(&params.gamma, &gamma_features(row.a, row.t, r[i])))
        })
        .sum();
    let (se, pseudo) = standard_errors(&info);
    if pseudo {
        warnings.push("information matrix singular; standard errors from pseudo-inverse".into());
    }
    Ok(GpsFit {
        params,
        loglik,
        info,
        se,
        converged: fa.converged && fg.converged,
        warnings,
    })
}

fn gps_curve_values(p: &GpsParams, ds: &Dataset, grid: &[f64]) -> Result<Vec<f64>> {
    let m = grid.len();
    let mut v = par_sum_vec(ds.n(), 2 * m, |i, acc| {
        let row = ds.row(i);
        for (j, &t) in grid.iter().enumerate() {
            let r = p.score(t, row.x, row.z);
            acc[j] += p.admit_prob(t, r);
            acc[m + j] += p.outcome_response(t, r);
        }
        Ok(())
    })?;
    v.iter_mut().for_each(|x| *x /= ds.n() as f64);
    Ok(v)
}

/// GPS decision and outcome curves `(θ, γ)` with delta-method intervals.
pub fn gps_curves(fit: &GpsFit, ds: &Dataset, grid: &[f64], level: f64) -> Result<(CurveResult, CurveResult)> {
    check_grid(grid)?;
    let template = &fit.params;
    let cis = delta_core(
        &template.to_vec(),
        &fit.info,
        |v| gps_curve_values(&template.with_values(v)?, ds, grid),
        level,
    )?;
    let m = grid.len();
    let none = vec![false; m];
    Ok((
        CurveResult::from_cis(Estimand::Theta, "gps", level, grid, &cis[..m], none.clone()),
        CurveResult::from_cis(Estimand::Gamma, "gps", level, grid, &cis[m..], none),
    ))
}

/// Outcome dose-response `n⁻¹ Σ_i l(t, r(t, x_i, z_i))`.
pub fn gps_curve(fit: &GpsFit, ds: &Dataset, grid: &[f64]) -> Result<CurveResult> {
    Ok(gps_curves(fit, ds, grid, crate::effects::DEFAULT_LEVEL)?.1)
}

// ---------------------------------------------------------------------------
// Lognormal latent model

/// Latent model with `log T | x, z, h ~ N(m_h + σ²/2, σ²)`,
/// `m_h = beta1·x + beta2·z + beta3·h + beta4·(1-h)`, and
/// `logit P(A = 1 | t, h, z, x) = nu1·x + nu2·z + nu3·log t + nu4·h + nu5·(1-h)`.
/// The `H` prior, `Z` components and outcome cells are as in the Brownian
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct LognormalParams {
    pub eta_h: Vec<f64>,
    pub z_models: Vec<ZModel>,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta3: f64,
    pub beta4: f64,
    pub log_sigma: f64,
    pub nu1: Vec<f64>,
    pub nu2: Vec<f64>,
    pub nu3: f64,
    pub nu4: f64,
    pub nu5: f64,
    pub cells: [f64; 4],
}

struct LognormalBlocks {
    eta_h: Range<usize>,
    z: Vec<Range<usize>>,
    beta: Range<usize>,
    log_sigma: usize,
    nu: Range<usize>,
    cells: Range<usize>,
}

impl LognormalParams {
    pub fn for_schema(schema: &ColumnSchema) -> Self {
        let base = LatentModelParams::for_schema(schema);
        let (k, p) = (schema.k(), schema.p());
        LognormalParams {
            eta_h: base.eta_h,
            z_models: base.z_models,
            beta1: vec![0.0; k],
            beta2: vec![0.0; p],
            beta3: 0.0,
            beta4: 0.0,
            log_sigma: 0.0,
            nu1: vec![0.0; k],
            nu2: vec![0.0; p],
            nu3: 0.0,
            nu4: 0.0,
            nu5: 0.0,
            cells: [0.0; 4],
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    fn blocks(&self) -> LognormalBlocks {
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let eta_h = take(self.eta_h.len());
        let z = self.z_models.iter().map(|m| take(m.n_params())).collect();
        let beta = take(self.beta1.len() + self.beta2.len() + 2);
        let log_sigma = take(1).start;
        let nu = take(self.nu1.len() + self.nu2.len() + 3);
        let cells = take(4);
        LognormalBlocks {
            eta_h,
            z,
            beta,
            log_sigma,
            nu,
            cells,
        }
    }

    /// `eta_h, z blocks, beta1..beta4, log sigma, nu1..nu5, cells`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.eta_h.clone();
        for m in &self.z_models {
            v.extend_from_slice(&m.coef);
            if m.kind == ColumnKind::Continuous {
                v.push(m.log_var);
            }
        }
        v.extend_from_slice(&self.beta1);
        v.extend_from_slice(&self.beta2);
        v.extend([self.beta3, self.beta4, self.log_sigma]);
        v.extend_from_slice(&self.nu1);
        v.extend_from_slice(&self.nu2);
        v.extend([self.nu3, self.nu4, self.nu5]);
        v.extend_from_slice(&self.cells);
        v
    }

    pub fn with_values(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.blocks().cells.end {
            return Err(Error::Shape("lognormal parameter vector has the wrong length".into()));
        }
        let mut out = self.clone();
        let mut it = v.iter().copied();
        let mut next = || it.next().unwrap_or(f64::NAN);
        out.eta_h.iter_mut().for_each(|x| *x = next());
        for m in &mut out.z_models {
            m.coef.iter_mut().for_each(|x| *x = next());
            if m.kind == ColumnKind::Continuous {
                m.log_var = next();
            }
        }
        out.beta1.iter_mut().for_each(|x| *x = next());
        out.beta2.iter_mut().for_each(|x| *x = next());
        out.beta3 = next();
        out.beta4 = next();
        out.log_sigma = next();
        out.nu1.iter_mut().for_each(|x| *x = next());
        out.nu2.iter_mut().for_each(|x| *x = next());
        out.nu3 = next();
        out.nu4 = next();
        out.nu5 = next();
        out.cells.iter_mut().for_each(|x| *x = next());
        Ok(out)
    }

    pub fn labels(&self, schema: &ColumnSchema) -> Vec<(String, String)> {
        let xs: Vec<String> = schema.x.iter().map(|c| c.name.clone()).collect();
        let zs: Vec<String> = schema.z.iter().map(|c| c.name.clone()).collect();
        let mut out = Vec::new();
        let with_x: Vec<String> = std::iter::once("intercept".to_string()).chain(xs.iter().cloned()).collect();
        for n in &with_x {
            out.push(("h_prior".into(), n.clone()));
        }
        for (m, spec) in self.z_models.iter().zip(&schema.z) {
            for n in with_x.iter().chain(std::iter::once(&"h".to_string())) {
                out.push((format!("z.{}", spec.name), n.clone()));
            }
            if m.kind == ColumnKind::Continuous {
                out.push((format!("z.{}", spec.name), "log_var".into()));
            }
        }
        for n in xs.iter().chain(&zs).cloned().chain(["h".into(), "not_h".into(), "log_sigma".into()]) {
            out.push(("log_time".into(), n));
        }
        for n in xs.iter().chain(&zs).cloned().chain(["log_t".into(), "h".into(), "not_h".into()]) {
            out.push(("logit_a".into(), n));
        }
        for n in CELL_NAMES {
            out.push(("cells".into(), n.into()));
        }
        out
    }

    pub fn doc_of(&self, schema: &ColumnSchema, values: &[f64]) -> ParamDoc {
        let mut doc = ParamDoc::new();
        for ((b, n), v) in self.labels(schema).into_iter().zip(values) {
            doc.entry(b).or_default().insert(n, *v);
        }
        doc
    }

    #[inline]
    pub(crate) fn time_mean(&self, x: &[f64], z: &[f64], h: u8) -> f64 {
        dot(&self.beta1, x) + dot(&self.beta2, z) + if h == 1 { self.beta3 } else { self.beta4 }
    }

    #[inline]
    fn admit_logit(&self, x: &[f64], z: &[f64], logt: f64, h: u8) -> f64 {
        dot(&self.nu1, x) + dot(&self.nu2, z) + self.nu3 * logt + if h == 1 { self.nu4 } else { self.nu5 }
    }

    pub fn cell_prob(&self, h: u8, a: u8) -> f64 {
        sigmoid(self.cells[cell_index(h, a)])
    }

    /// `P(A = 1 | T = t, h, z, x)`.
    pub fn admit_prob(&self, x: &[f64], z: &[f64], t: f64, h: u8) -> f64 {
        sigmoid(self.admit_logit(x, z, t.ln(), h))
    }

    fn pretreatment_terms(&self, x: &[f64], z: &[f64]) -> [f64; 2] {
        let eta = self.eta_h[0] + dot(&self.eta_h[1..], x);
        let zl = |h: u8| -> f64 { self.z_models.iter().zip(z).map(|(m, &zj)| m.loglik(x, zj, h)).sum() };
        [log_sigmoid(-eta) + zl(0), log_sigmoid(eta) + zl(1)]
    }

    /// Log-density of `(t, a, y)` given `(x, z, h)`.
    fn decision_terms(&self, x: &[f64], z: &[f64], t: f64, a: u8, y: u8, h: u8) -> f64 {
        lognormal_log_density(t, self.time_mean(x, z, h), self.sigma())
            + bernoulli_logit_ll(a == 1, self.admit_logit(x, z, t.ln(), h))
            + bernoulli_logit_ll(y == 1, self.cells[cell_index(h, a)])
    }

    /// Swap the class labels so that class 1 has the larger admit intercept.
    fn canonical(mut self) -> Self {
        if self.nu4 >= self.nu5 {
            return self;
        }
        self.eta_h.iter_mut().for_each(|v| *v = -*v);
        for m in &mut self.z_models {
            let k = m.coef.len() - 2;
            m.coef[0] += m.coef[k + 1];
            m.coef[k + 1] = -m.coef[k + 1];
        }
        std::mem::swap(&mut self.beta3, &mut self.beta4);
        std::mem::swap(&mut self.nu4, &mut self.nu5);
        self.cells.swap(cell_index(0, 0), cell_index(1, 0));
        self.cells.swap(cell_index(0, 1), cell_index(1, 1));
        self
    }

    /// Shared blocks packed into Brownian-model parameters (threshold blocks zero).
    pub(crate) fn as_latent(&self) -> LatentModelParams {
        let k = self.beta1.len();
        let p = self.beta2.len();
        let mut base = LatentModelParams::zeros(k, &self.z_models.iter().map(|m| m.kind).collect::<Vec<_>>());
        base.eta_h = self.eta_h.clone();
        base.z_models = self.z_models.clone();
        base.cells = self.cells;
        debug_assert_eq!(base.beta_c.len(), 1 + k + p);
        base
    }
}

pub(crate) struct LognormalEm<'a> {
    pub ds: &'a Dataset,
}

fn time_design(ds: &Dataset, with_logt: bool) -> (Vec<f64>, usize) {
    let (n, k, p) = (ds.n(), ds.k(), ds.p());
    let ncol = k + p + 2 + usize::from(with_logt);
    let mut d = Vec::with_capacity(2 * n * ncol);
    for h in 0..2u8 {
        for i in 0..n {
            let r = ds.row(i);
            d.extend_from_slice(r.x);
            d.extend_from_slice(r.z);
            if with_logt {
                d.push(r.t.ln());
            }
            d.push(h as f64);
            d.push(1.0 - h as f64);
        }
    }
    (d, ncol)
}

impl EmModel for LognormalEm<'_> {
    type Params = LognormalParams;

    fn n_rows(&self) -> usize {
        self.ds.n()
    }

    fn to_vec(&self, p: &LognormalParams) -> Vec<f64> {
        p.to_vec()
    }

    fn with_values(&self, template: &LognormalParams, v: &[f64]) -> Result<LognormalParams> {
        template.with_values(v)
    }

    fn row_terms(&self, p: &LognormalParams, i: usize) -> Result<[f64; 2]> {
        let r = self.ds.row(i);
        let pre = p.pretreatment_terms(r.x, r.z);
        Ok([
            pre[0] + p.decision_terms(r.x, r.z, r.t, r.a, r.y, 0),
            pre[1] + p.decision_terms(r.x, r.z, r.t, r.a, r.y, 1),
        ])
    }

    fn q_gradient(&self, p: &LognormalParams, w: &[f64]) -> Result<Vec<f64>> {
        let bl = p.blocks();
        let dim = bl.cells.end;
        let s2 = (2.0 * p.log_sigma).exp();
        par_sum_vec(self.ds.n(), dim, |i, acc| {
            let r = self.ds.row(i);
            let (k, pz) = (r.x.len(), r.z.len());
            let logt = r.t.ln();
            for h in 0..2u8 {
                let wh = if h == 1 { w[i] } else { 1.0 - w[i] };
                if wh == 0.0 {
                    continue;
                }
                add_pretreatment_gradient(&p.eta_h, &p.z_models, &bl.eta_h, &bl.z, r.x, r.z, h, wh, acc);
                let res = logt - p.time_mean(r.x, r.z, h) - 0.5 * s2;
                let gm = wh * res / s2;
                let b = &mut acc[bl.beta.clone()];
                for (o, v) in b[..k].iter_mut().zip(r.x) {
                    *o += gm * v;
                }
                for (o, v) in b[k..k + pz].iter_mut().zip(r.z) {
                    *o += gm * v;
                }
                b[k + pz + usize::from(h == 0)] += gm;
                acc[bl.log_sigma] += wh * (-1.0 + res * res / s2 + res);
                let ga = wh * (r.a as f64 - sigmoid(p.admit_logit(r.x, r.z, logt, h)));
                let nu = &mut acc[bl.nu.clone()];
                for (o, v) in nu[..k].iter_mut().zip(r.x) {
                    *o += ga * v;
                }
                for (o, v) in nu[k..k + pz].iter_mut().zip(r.z) {
                    *o += ga * v;
                }
                nu[k + pz] += ga * logt;
                nu[k + pz + 1 + usize::from(h == 0)] += ga;
                let j = cell_index(h, r.a);
                acc[bl.cells.start + j] += wh * (r.y as f64 - sigmoid(p.cells[j]));
            }
            Ok(())
        })
    }

    fn m_step(&self, p: &LognormalParams, w: &[f64], _controls: &FitControls) -> Result<MStep<LognormalParams>> {
        let ds = self.ds;
        let (k, pz) = (ds.k(), ds.p());
        let mut warnings = Vec::new();
        let shared = pretreatment_update(&p.as_latent(), ds, w, &mut warnings)?;
        let mut next = p.clone();
        next.eta_h = shared.eta_h;
        next.z_models = shared.z_models;
        next.cells = cell_update(ds, w, &p.cells);

        let w2: Vec<f64> = w.iter().map(|v| 1.0 - v).chain(w.iter().copied()).collect();
        let (td, tc) = time_design(ds, false);
        let logt: Vec<f64> = ds.t().iter().map(|t| t.ln()).collect();
        let l2: Vec<f64> = logt.iter().chain(&logt).copied().collect();
        let c = weighted_least_squares(&td, tc, &l2, &w2)?;
        let mut ss = 0.0;
        let mut tot = 0.0;
        for ((row, l), wv) in td.chunks_exact(tc).zip(&l2).zip(&w2) {
            ss += wv * (l - dot(row, &c)).powi(2);
            tot += wv;
        }
        let s2 = (ss / tot).max(1e-300);
        next.beta1.copy_from_slice(&c[..k]);
        next.beta2.copy_from_slice(&c[k..k + pz]);
        next.beta3 = c[k + pz] - 0.5 * s2;
        next.beta4 = c[k + pz + 1] - 0.5 * s2;
        next.log_sigma = 0.5 * s2.ln();

        let (ad, ac) = time_design(ds, true);
        let a: Vec<f64> = ds.a().iter().map(|&v| v as f64).collect();
        let a2: Vec<f64> = a.iter().chain(&a).copied().collect();
        let init: Vec<f64> = p.nu1.iter().chain(&p.nu2).copied().chain([p.nu3, p.nu4, p.nu5]).collect();
        let fit = weighted_logistic(&ad, ac, &a2, &w2, Some(&init))?;
        if fit.ridge_used {
            warnings.push("decision model: separable labels, ridge fallback used".into());
        }
        next.nu1.copy_from_slice(&fit.coef[..k]);
        next.nu2.copy_from_slice(&fit.coef[k..k + pz]);
        next.nu3 = fit.coef[k + pz];
        next.nu4 = fit.coef[k + pz + 1];
        next.nu5 = fit.coef[k + pz + 2];
        Ok(MStep {
            params: next,
            warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LognormalFit {
    pub params: LognormalParams,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub info: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub se: Vec<f64>,
    pub start: usize,
    pub warnings: Vec<String>,
}

fn lognormal_random_start(ds: &Dataset, rng: &mut ChaCha8Rng) -> LognormalParams {
    let template = LatentModelParams::for_schema(ds.schema());
    let shared = random_start(&template, ds, rng);
    let normal = Normal::new(0.0, 0.25).expect("valid normal");
    let mut p = LognormalParams::for_schema(ds.schema());
    p.eta_h = shared.eta_h;
    p.z_models = shared.z_models;
    p.cells = shared.cells;
    for v in p.beta1.iter_mut().chain(p.beta2.iter_mut()).chain(p.nu1.iter_mut()).chain(p.nu2.iter_mut()) {
        *v = normal.sample(rng);
    }
    let logt: Vec<f64> = ds.t().iter().map(|t| t.ln()).collect();
    let mean = logt.iter().sum::<f64>() / logt.len() as f64;
    let var = logt.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logt.len() as f64;
    p.log_sigma = 0.5 * var.max(1e-8).ln();
    p.beta3 = mean + normal.sample(rng) - 0.5 * var;
    p.beta4 = mean + normal.sample(rng) - 0.5 * var;
    p.nu3 = normal.sample(rng);
    p.nu4 = normal.sample(rng);
    p.nu5 = normal.sample(rng);
    p
}

/// EM fit of the lognormal latent model with the same multi-start scheme as
/// the Brownian model; labels are oriented so class 1 is more often admitted.
pub fn lognormal_fit(ds: &Dataset, init: Option<LognormalParams>, controls: &FitControls) -> Result<LognormalFit> {
    let model = LognormalEm { ds };
    let starts: Vec<Result<LognormalParams>> = match init {
        Some(p) => vec![Ok(p)],
        None => {
            let mut v = Vec::new();
            if controls.warm_start {
                let mut rng = ChaCha8Rng::seed_from_u64(controls.seed);
                let mut base = lognormal_random_start(ds, &mut rng);
                base.eta_h.iter_mut().for_each(|x| *x = 0.0);
                let w: Vec<f64> = ds.a().iter().map(|&a| a as f64).collect();
                v.push(model.m_step(&base, &w, controls).map(|m| m.params));
            }
            for s in 0..controls.n_starts {
                let mut rng = ChaCha8Rng::seed_from_u64(controls.seed);
                rng.set_stream(s as u64 + 1);
                v.push(Ok(lognormal_random_start(ds, &mut rng)));
            }
            v
        }
    };
    let mut best: Option<(EmRun<LognormalParams>, usize)> = None;
    let mut failures = Vec::new();
    for (idx, s) in starts.into_iter().enumerate() {
        match s.and_then(|p| run_em(&model, p, controls)) {
            Ok(r) => {
                if best.as_ref().is_none_or(|(b, _)| r.loglik > b.loglik) {
                    best = Some((r, idx));
                }
            }
            Err(e) => failures.push(format!("start {idx}: {e}")),
        }
    }
    let (run, start) = best.ok_or_else(|| Error::Fitting(format!("all starts failed: {}", failures.join("; "))))?;
    let params = run.params.canonical();
    let info = oakes_generic(&model, &params)?;
    let (se, pseudo) = standard_errors(&info);
    let mut warnings = run.warnings;
    if pseudo {
        warnings.push("information matrix singular; standard errors from pseudo-inverse".into());
    }
    Ok(LognormalFit {
        params,
        loglik: run.loglik,
        loglik_trace: run.trace,
        info,
        converged: run.converged,
        iterations: run.iterations,
        se,
        start,
        warnings,
    })
}

fn lognormal_curve_values(p: &LognormalParams, ds: &Dataset, grid: &[f64]) -> Result<Vec<f64>> {
    let m = grid.len();
    let mut v = par_sum_vec(ds.n(), 2 * m, |i, acc| {
        let r = ds.row(i);
        let w1 = posterior_from_terms(p.pretreatment_terms(r.x, r.z));
        let w = [1.0 - w1, w1];
        for (j, &t) in grid.iter().enumerate() {
            for h in 0..2u8 {
                let pa = p.admit_prob(r.x, r.z, t, h);
                acc[j] += w[h as usize] * pa;
                acc[m + j] += w[h as usize] * (p.cell_prob(h, 1) * pa + p.cell_prob(h, 0) * (1.0 - pa));
            }
        }
        Ok(())
    })?;
    v.iter_mut().for_each(|x| *x /= ds.n() as f64);
    Ok(v)
}

/// `(θ, γ)` curves of the lognormal latent model with `(X, Z)`-only weights.
pub fn lognormal_curves(fit: &LognormalFit, ds: &Dataset, grid: &[f64], level: f64) -> Result<(CurveResult, CurveResult)> {
    check_grid(grid)?;
    let template = &fit.params;
    let cis = delta_core(
        &template.to_vec(),
        &fit.info,
        |v| lognormal_curve_values(&template.with_values(v)?, ds, grid),
        level,
    )?;
    let m = grid.len();
    let none = vec![false; m];
    Ok((
        CurveResult::from_cis(Estimand::Theta, "latent_lognormal", level, grid, &cis[..m], none.clone()),
        CurveResult::from_cis(Estimand::Gamma, "latent_lognormal", level, grid, &cis[m..], none),
    ))
}

pub fn lognormal_observed_loglik(p: &LognormalParams, ds: &Dataset) -> Result<f64> {
    let model = LognormalEm { ds };
    par_sum(ds.n(), |i| {
        let t = model.row_terms(p, i)?;
        Ok(log_add_exp(t[0], t[1]))
    })
}

// ---------------------------------------------------------------------------
// Variants without the latent class

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoLatentModel {
    Brownian,
    Lognormal,
}

/// Fit and curves of a model with the latent class removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoLatentResult {
    pub model: NoLatentModel,
    /// Binary `Z` column indexing the two drifts (Brownian variant only).
    pub proxy: Option<String>,
    /// Log-likelihood on the same scale as the latent model's observed
    /// log-likelihood, so the two can be compared.
    pub loglik: f64,
    pub params: ParamDoc,
    pub theta: CurveResult,
    pub gamma: CurveResult,
    pub warnings: Vec<String>,
}

fn proxy_index(schema: &ColumnSchema, proxy: Option<&str>) -> Result<usize> {
    match proxy {
        Some(name) => {
            let j = schema
                .z
                .iter()
                .position(|c| c.name == name)
                .ok_or_else(|| Error::Config(format!("proxy column '{name}' is not a z column")))?;
            if schema.z[j].kind != ColumnKind::Binary {
                return Err(Error::Config(format!("proxy column '{name}' must be binary")));
            }
            Ok(j)
        }
        None => schema
            .z
            .iter()
            .position(|c| c.kind == ColumnKind::Binary)
            .ok_or_else(|| Error::Config("the Brownian variant needs a binary z column".into())),
    }
}

/// Threshold-plus-cells parameters of the Brownian model with the class
/// fixed to the proxy column.
struct ProxyBrownian<'a> {
    ds: &'a Dataset,
    w: Vec<f64>,
    template: LatentModelParams,
}

impl ProxyBrownian<'_> {
    fn vec_of(p: &LatentModelParams) -> Vec<f64> {
        let mut v = threshold_vec(p);
        v.extend_from_slice(&p.cells);
        v
    }

    fn params(&self, v: &[f64]) -> LatentModelParams {
        let mut p = self.template.clone();
        let nthr = v.len() - 4;
        crate::emfit::set_threshold(&mut p, &v[..nthr]);
        p.cells.copy_from_slice(&v[nthr..]);
        p
    }

    fn gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        let p = self.params(v);
        let (_, mut g) = threshold_q(&p, self.ds, &self.w)?;
        let mut gc = [0.0; 4];
        for i in 0..self.ds.n() {
            let (a, y) = (self.ds.a()[i], self.ds.y()[i] as f64);
            let h = self.w[i] as u8;
            let j = cell_index(h, a);
            gc[j] += y - sigmoid(p.cells[j]);
        }
        g.extend_from_slice(&gc);
        Ok(g)
    }
}

fn brownian_proxy_values(p: &LatentModelParams, ds: &Dataset, w: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let m = grid.len();
    let d = p.drifts();
    let mut v = par_sum_vec(ds.n(), 2 * m, |i, acc| {
        let r = ds.row(i);
        let h = w[i] as u8;
        let spec = FptSpec {
            b: p.log_b(r.x).exp(),
            c: sigmoid(p.logit_c(r.x, r.z)),
            d: d[h as usize],
        };
        for (j, &t) in grid.iter().enumerate() {
            let pa = fpt::conditional_admit_prob(&spec, t)?;
            acc[j] += pa;
            acc[m + j] += p.cell_prob(h, 1) * pa + p.cell_prob(h, 0) * (1.0 - pa);
        }
        Ok(())
    })?;
    v.iter_mut().for_each(|x| *x /= ds.n() as f64);
    Ok(v)
}

fn no_latent_brownian(
    ds: &Dataset,
    proxy: Option<&str>,
    grid: &[f64],
    controls: &FitControls,
    level: f64,
) -> Result<NoLatentResult> {
    let j = proxy_index(ds.schema(), proxy)?;
    let w: Vec<f64> = (0..ds.n()).map(|i| ds.row(i).z[j]).collect();
    if w.iter().all(|&v| v == 0.0) || w.iter().all(|&v| v == 1.0) {
        return Err(Error::StratumEmpty(if w[0] == 0.0 { 1 } else { 0 }));
    }
    let mut warnings = Vec::new();
    let mut scratch = Vec::new();
    let template = LatentModelParams::for_schema(ds.schema());
    // pretreatment blocks with the class observed; the proxy's own
    // component becomes deterministic and is dropped from the likelihood
    let mut p = pretreatment_update(&template, ds, &w, &mut scratch)?;
    p.cells = cell_update(ds, &w, &p.cells);
    let mut v_old = f64::NEG_INFINITY;
    for _ in 0..20 {
        p = threshold_update(&p, ds, &w, controls, &mut warnings)?;
        let (v, _) = threshold_q(&p, ds, &w)?;
        if (v - v_old).abs() <= 1e-10 * (1.0 + v.abs()) {
            break;
        }
        v_old = v;
    }
    let model = ProxyBrownian {
        ds,
        w: w.clone(),
        template: p.clone(),
    };
    let theta = ProxyBrownian::vec_of(&p);
    let info = numeric_information(&theta, |v| model.gradient(v))?;
    let cis = delta_core(&theta, &info, |v| brownian_proxy_values(&model.params(v), ds, &w, grid), level)?;

    let (thr, _) = threshold_q(&p, ds, &w)?;
    let rest = par_sum(ds.n(), |i| {
        let r = ds.row(i);
        let h = w[i] as u8;
        let eta = p.eta(r.x);
        let prior = if h == 1 { log_sigmoid(eta) } else { log_sigmoid(-eta) };
        let z_other: f64 = p
            .z_models
            .iter()
            .zip(r.z)
            .enumerate()
            .filter(|(l, _)| *l != j)
            .map(|(_, (m, &zl))| m.loglik(r.x, zl, h))
            .sum();
        Ok(prior + z_other + bernoulli_logit_ll(r.y == 1, p.cells[cell_index(h, r.a)]))
    })?;
    let m = grid.len();
    let blocks = p.blocks();
    let labels = p.labels(ds.schema())?;
    let all = p.to_vec();
    let mut params = ParamDoc::new();
    for (idx, (b, n)) in labels.into_iter().enumerate() {
        let keep = blocks.threshold().contains(&idx) || blocks.cells.contains(&idx) || blocks.eta_h.contains(&idx);
        if keep {
            params.entry(b).or_default().insert(n, all[idx]);
        }
    }
    let none = vec![false; m];
    Ok(NoLatentResult {
        model: NoLatentModel::Brownian,
        proxy: Some(ds.schema().z[j].name.clone()),
        loglik: thr + rest,
        params,
        theta: CurveResult::from_cis(Estimand::Theta, "no_latent_brownian", level, grid, &cis[..m], none.clone()),
        gamma: CurveResult::from_cis(Estimand::Gamma, "no_latent_brownian", level, grid, &cis[m..], none),
        warnings,
    })
}

/// Lognormal model without `H`: compact vector
/// `[beta1, beta2, beta0, log sigma, nu1, nu2, nu3, nu0, cell_a0, cell_a1]`.
struct PlainLognormal<'a> {
    ds: &'a Dataset,
}

impl PlainLognormal<'_> {
    fn gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        let (k, pz) = (self.ds.k(), self.ds.p());
        let nb = k + pz + 1;
        let s2 = (2.0 * v[nb]).exp();
        let nu0 = nb + 1;
        par_sum_vec(self.ds.n(), v.len(), |i, acc| {
            let r = self.ds.row(i);
            let logt = r.t.ln();
            let m = dot(&v[..k], r.x) + dot(&v[k..k + pz], r.z) + v[k + pz];
            let res = logt - m - 0.5 * s2;
            let g = res / s2;
            for (o, x) in acc[..k].iter_mut().zip(r.x) {
                *o += g * x;
            }
            for (o, z) in acc[k..k + pz].iter_mut().zip(r.z) {
                *o += g * z;
            }
            acc[k + pz] += g;
            acc[nb] += -1.0 + res * res / s2 + res;
            let nu = &v[nu0..nu0 + k + pz + 2];
            let lin = dot(&nu[..k], r.x) + dot(&nu[k..k + pz], r.z) + nu[k + pz] * logt + nu[k + pz + 1];
            let ga = r.a as f64 - sigmoid(lin);
            let gn = &mut acc[nu0..nu0 + k + pz + 2];
            for (o, x) in gn[..k].iter_mut().zip(r.x) {
                *o += ga * x;
            }
            for (o, z) in gn[k..k + pz].iter_mut().zip(r.z) {
                *o += ga * z;
            }
            gn[k + pz] += ga * logt;
            gn[k + pz + 1] += ga;
            let c = nu0 + k + pz + 2 + r.a as usize;
            acc[c] += r.y as f64 - sigmoid(v[c]);
            Ok(())
        })
    }

    fn values(&self, v: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
        let (k, pz) = (self.ds.k(), self.ds.p());
        let nu0 = k + pz + 2;
        let nu = &v[nu0..nu0 + k + pz + 2];
        let cells = [sigmoid(v[nu0 + k + pz + 2]), sigmoid(v[nu0 + k + pz + 3])];
        let m = grid.len();
        let mut out = par_sum_vec(self.ds.n(), 2 * m, |i, acc| {
            let r = self.ds.row(i);
            let base = dot(&nu[..k], r.x) + dot(&nu[k..k + pz], r.z) + nu[k + pz + 1];
            for (j, &t) in grid.iter().enumerate() {
                let pa = sigmoid(base + nu[k + pz] * t.ln());
                acc[j] += pa;
                acc[m + j] += cells[1] * pa + cells[0] * (1.0 - pa);
            }
            Ok(())
        })?;
        out.iter_mut().for_each(|x| *x /= self.ds.n() as f64);
        Ok(out)
    }
}

fn no_latent_lognormal(ds: &Dataset, grid: &[f64], level: f64) -> Result<NoLatentResult> {
    let (n, k, pz) = (ds.n(), ds.k(), ds.p());
    let ones = vec![1.0; n];
    let mut warnings = Vec::new();
    // time block
    let mut td = Vec::with_capacity(n * (k + pz + 1));
    let mut ad = Vec::with_capacity(n * (k + pz + 2));
    for i in 0..n {
        let r = ds.row(i);
        td.extend_from_slice(r.x);
        td.extend_from_slice(r.z);
        td.push(1.0);
        ad.extend_from_slice(r.x);
        ad.extend_from_slice(r.z);
        ad.push(r.t.ln());
        ad.push(1.0);
    }
    let logt: Vec<f64> = ds.t().iter().map(|t| t.ln()).collect();
    let c = weighted_least_squares(&td, k + pz + 1, &logt, &ones)?;
    let rss: f64 = td.chunks_exact(k + pz + 1).zip(&logt).map(|(row, l)| (l - dot(row, &c)).powi(2)).sum();
    let s2 = rss / n as f64;
    let mut v = c;
    v[k + pz] -= 0.5 * s2;
    v.push(0.5 * s2.ln());
    let a: Vec<f64> = ds.a().iter().map(|&x| x as f64).collect();
    let fa = weighted_logistic(&ad, k + pz + 2, &a, &ones, None)?;
    if fa.ridge_used {
        warnings.push("decision model: separable labels, ridge fallback used".into());
    }
    v.extend_from_slice(&fa.coef);
    let mut cnt = [[0.0f64; 2]; 2];
    for i in 0..n {
        cnt[ds.a()[i] as usize][0] += 1.0;
        cnt[ds.a()[i] as usize][1] += ds.y()[i] as f64;
    }
    for c in cnt {
        let prob = if c[0] > 0.0 { c[1] / c[0] } else { 0.5 };
        v.push(crate::math::logit(prob.clamp(1e-10, 1.0 - 1e-10)));
    }
    let model = PlainLognormal { ds };
    let info = numeric_information(&v, |x| model.gradient(x))?;
    let cis = delta_core(&v, &info, |x| model.values(x, grid), level)?;

    // Z given x (with the class fixed at 0) so the log-likelihood is on the
    // latent model's scale
    let zeros = vec![0.0; n];
    let mut scratch = Vec::new();
    let pre = pretreatment_update(&LatentModelParams::for_schema(ds.schema()), ds, &zeros, &mut scratch)?;
    let nb = k + pz + 1;
    let sigma = v[nb].exp();
    let nu0 = nb + 1;
    let loglik = par_sum(n, |i| {
        let r = ds.row(i);
        let m = dot(&v[..k], r.x) + dot(&v[k..k + pz], r.z) + v[k + pz];
        let nu = &v[nu0..nu0 + k + pz + 2];
        let lin = dot(&nu[..k], r.x) + dot(&nu[k..k + pz], r.z) + nu[k + pz] * r.t.ln() + nu[k + pz + 1];
        Ok(pre.z_loglik(r.x, r.z, 0)
            + lognormal_log_density(r.t, m, sigma)
            + bernoulli_logit_ll(r.a == 1, lin)
            + bernoulli_logit_ll(r.y == 1, v[nu0 + k + pz + 2 + r.a as usize]))
    })?;

    let xs: Vec<String> = ds.schema().x.iter().map(|c| c.name.clone()).collect();
    let zs: Vec<String> = ds.schema().z.iter().map(|c| c.name.clone()).collect();
    let mut params = ParamDoc::new();
    let names_t: Vec<String> = xs.iter().chain(&zs).cloned().chain(["intercept".into(), "log_sigma".into()]).collect();
    let names_a: Vec<String> = xs.iter().chain(&zs).cloned().chain(["log_t".into(), "intercept".into()]).collect();
    let mut it = v.iter();
    for nme in names_t {
        params.entry("log_time".into()).or_default().insert(nme, *it.next().expect("length"));
    }
    for nme in names_a {
        params.entry("logit_a".into()).or_default().insert(nme, *it.next().expect("length"));
    }
    for nme in ["a0", "a1"] {
        params.entry("cells".into()).or_default().insert(nme.into(), *it.next().expect("length"));
    }
    let m = grid.len();
    let none = vec![false; m];
    Ok(NoLatentResult {
        model: NoLatentModel::Lognormal,
        proxy: None,
        loglik,
        params,
        theta: CurveResult::from_cis(Estimand::Theta, "no_latent_lognormal", level, grid, &cis[..m], none.clone()),
        gamma: CurveResult::from_cis(Estimand::Gamma, "no_latent_lognormal", level, grid, &cis[m..], none),
        warnings,
    })
}

/// Fit a variant without the latent class and evaluate its curves. The
/// Brownian variant indexes the two drifts by a binary `Z` column (`proxy`,
/// default the first binary column).
pub fn no_latent_variant(
    model: NoLatentModel,
    ds: &Dataset,
    proxy: Option<&str>,
    grid: &[f64],
    controls: &FitControls,
    level: f64,
) -> Result<NoLatentResult> {
    check_grid(grid)?;
    match model {
        NoLatentModel::Brownian => no_latent_brownian(ds, proxy, grid, controls, level),
        NoLatentModel::Lognormal => no_latent_lognormal(ds, grid, level),
    }
}

/// Per-row GPS values at the observed times.
pub fn gps_scores(p: &GpsParams, ds: &Dataset) -> Result<Vec<f64>> {
    par_map(ds.n(), |i| {
        let r = ds.row(i);
        Ok(p.score(r.t, r.x, r.z))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnSpec;
    use crate::emfit::q_value_generic;
    use crate::simlab::simulate_lognormal;

    fn schema() -> ColumnSchema {
        ColumnSchema {
            x: vec![ColumnSpec::new("x1", ColumnKind::Continuous), ColumnSpec::new("x2", ColumnKind::Binary)],
            z: vec![ColumnSpec::new("z1", ColumnKind::Continuous), ColumnSpec::new("z2", ColumnKind::Binary)],
            t: "t".into(),
            a: "a".into(),
            y: "y".into(),
        }
    }

    pub(crate) fn lognormal_truth() -> LognormalParams {
        let mut p = LognormalParams::for_schema(&schema());
        p.eta_h = vec![-0.2, 0.4, 0.3];
        p.z_models[0].coef = vec![0.0, 0.3, 0.0, 1.0];
        p.z_models[1].coef = vec![-0.5, 0.0, 0.4, 1.2];
        p.beta1 = vec![0.2, -0.1];
        p.beta2 = vec![0.1, 0.0];
        p.beta3 = 0.3;
        p.beta4 = -0.4;
        p.log_sigma = (0.6f64).ln();
        p.nu1 = vec![0.2, 0.0];
        p.nu2 = vec![0.3, -0.2];
        p.nu3 = 0.4;
        p.nu4 = 1.2;
        p.nu5 = -1.5;
        p.cells = [-2.0, -0.8, -1.5, -1.2];
        p
    }

    #[test]
    fn lognormal_density_integrates_to_one() {
        let (v, _) = crate::quad::integrate(|t| lognormal_log_density(t, 0.3, 0.7).exp(), 1e-9, 200.0, 1e-12, 1e-10);
        assert!((v - 1.0).abs() < 1e-7);
    }

    #[test]
    fn lognormal_q_gradient_matches_differences() {
        let (ds, truth) = simulate_lognormal(60, &schema(), &lognormal_truth(), 3).unwrap();
        let model = LognormalEm { ds: &ds };
        let w: Vec<f64> = truth.h.iter().map(|&h| 0.2 + 0.6 * h as f64).collect();
        let p = lognormal_truth();
        let g = model.q_gradient(&p, &w).unwrap();
        let v = p.to_vec();
        for j in 0..v.len() {
            let h = 1e-6;
            let mut up = v.clone();
            up[j] += h;
            let mut dn = v.clone();
            dn[j] -= h;
            let fu = q_value_generic(&model, &p.with_values(&up).unwrap(), &w).unwrap();
            let fd = q_value_generic(&model, &p.with_values(&dn).unwrap(), &w).unwrap();
            let num = (fu - fd) / (2.0 * h);
            assert!((num - g[j]).abs() < 1e-5 * (1.0 + num.abs()), "param {j}: {num} vs {}", g[j]);
        }
    }

    #[test]
    fn lognormal_em_is_monotone() {
        let (ds, _) = simulate_lognormal(800, &schema(), &lognormal_truth(), 9).unwrap();
        let controls = FitControls {
            n_starts: 1,
            ..FitControls::default()
        };
        let fit = lognormal_fit(&ds, None, &controls).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-8);
        }
        assert!(fit.params.nu4 >= fit.params.nu5);
        let l0 = lognormal_observed_loglik(&fit.params, &ds).unwrap();
        assert!((l0 - fit.loglik).abs() < 1e-8 * l0.abs());
    }

    #[test]
    fn relabeling_keeps_the_likelihood() {
        let (ds, _) = simulate_lognormal(200, &schema(), &lognormal_truth(), 4).unwrap();
        let mut p = lognormal_truth();
        std::mem::swap(&mut p.nu4, &mut p.nu5);
        let l_before = lognormal_observed_loglik(&p, &ds).unwrap();
        let c = p.clone().canonical();
        assert!(c.nu4 > c.nu5);
        let l_after = lognormal_observed_loglik(&c, &ds).unwrap();
        assert!((l_before - l_after).abs() < 1e-9 * l_before.abs());
    }

    /// Newton-Raphson logistic regression written directly against nalgebra.
    fn oracle_logistic(design: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let q = design[0].len();
        let mut beta = nalgebra::DVector::<f64>::zeros(q);
        for _ in 0..100 {
            let mut g = nalgebra::DVector::<f64>::zeros(q);
            let mut hmat = nalgebra::DMatrix::<f64>::zeros(q, q);
            for (row, &yi) in design.iter().zip(y) {
                let x = nalgebra::DVector::from_column_slice(row);
                let p = 1.0 / (1.0 + (-x.dot(&beta)).exp());
                g += &x * (yi - p);
                hmat += &x * x.transpose() * (p * (1.0 - p));
            }
            let step = hmat.lu().solve(&g).unwrap();
            beta += &step;
            if step.norm() < 1e-12 {
                break;
            }
        }
        beta.iter().copied().collect()
    }

    #[test]
    fn degenerate_class_gives_plain_logistic_decision_model() {
        let mut truth = lognormal_truth();
        truth.nu3 = 0.0;
        let (ds, _) = simulate_lognormal(500, &schema(), &truth, 21).unwrap();
        let model = LognormalEm { ds: &ds };
        let w = vec![0.0; ds.n()];
        let m = model.m_step(&truth, &w, &FitControls::default()).unwrap().params;
        let design: Vec<Vec<f64>> = (0..ds.n())
            .map(|i| {
                let r = ds.row(i);
                r.x.iter().chain(r.z).copied().chain([r.t.ln(), 1.0]).collect()
            })
            .collect();
        let y: Vec<f64> = ds.a().iter().map(|&a| a as f64).collect();
        let oracle = oracle_logistic(&design, &y);
        let fitted: Vec<f64> = m.nu1.iter().chain(&m.nu2).copied().chain([m.nu3, m.nu5]).collect();
        for (a, b) in fitted.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-4, "{fitted:?} vs {oracle:?}");
        }
    }

    fn fixed_gps(gamma: Vec<f64>) -> GpsFit {
        let params = GpsParams {
            beta: vec![0.0, 0.1, 0.0, 0.2, 0.0],
            sigma: 0.5,
            alpha: vec![-0.2, 0.3, -0.1, 0.4, -0.05],
            gamma,
        };
        let q = params.to_vec().len();
        GpsFit {
            params,
            loglik: 0.0,
            info: DMatrix::identity(q, q) * 1e4,
            se: vec![0.01; q],
            converged: true,
            warnings: vec![],
        }
    }

    #[test]
    fn gps_constant_outcome_and_outcome_equal_to_decision() {
        let (ds, _) = simulate_lognormal(50, &schema(), &lognormal_truth(), 1).unwrap();
        let g0 = crate::math::logit(0.3);
        let f = fixed_gps(vec![g0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = gps_curve(&f, &ds, &[0.2, 1.0, 4.0]).unwrap();
        for v in &c.estimate {
            assert!((v - 0.3).abs() < 1e-12);
        }
        // outcome equals decision: large negative intercept, large a effect
        let f = fixed_gps(vec![-40.0, 0.0, 0.0, 0.0, 0.0, 80.0, 0.0, 0.0]);
        let (th, ga) = gps_curves(&f, &ds, &[0.2, 1.0, 4.0], 0.95).unwrap();
        for j in 0..3 {
            assert!((th.estimate[j] - ga.estimate[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn gps_fit_is_invariant_to_duplication() {
        let (ds, _) = simulate_lognormal(300, &schema(), &lognormal_truth(), 5).unwrap();
        let twice = ds.concat(&ds).unwrap();
        let a = gps_fit(&ds).unwrap();
        let b = gps_fit(&twice).unwrap();
        for (u, v) in a.params.to_vec().iter().zip(b.params.to_vec()) {
            assert!((u - v).abs() < 1e-6 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }

    #[test]
    fn gps_stage_one_residuals_center_on_half_variance() {
        let (ds, _) = simulate_lognormal(2000, &schema(), &lognormal_truth(), 6).unwrap();
        let f = gps_fit(&ds).unwrap();
        let mean: f64 = (0..ds.n())
            .map(|i| {
                let r = ds.row(i);
                r.t.ln() - f.params.w(r.x, r.z)
            })
            .sum::<f64>()
            / ds.n() as f64;
        assert!((mean - 0.5 * f.params.sigma.powi(2)).abs() < 1e-9);
    }

    #[test]
    fn no_latent_models_do_not_beat_latent_models() {
        let (ds, _) = simulate_lognormal(600, &schema(), &lognormal_truth(), 8).unwrap();
        let controls = FitControls {
            n_starts: 2,
            ..FitControls::default()
        };
        let full = lognormal_fit(&ds, None, &controls).unwrap();
        let plain = no_latent_variant(NoLatentModel::Lognormal, &ds, None, &[0.5, 1.0], &controls, 0.95).unwrap();
        assert!(plain.loglik <= full.loglik + 1e-6, "{} > {}", plain.loglik, full.loglik);
    }
}
