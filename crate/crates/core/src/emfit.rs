//! EM fitting, observed information through Oakes' identity, and
//! delta-method intervals.
//!
//! The EM loop, the Oakes computation and the multi-start driver are generic
//! over [`EmModel`] so alternative latent models reuse them.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, ColumnSchema, Dataset};
use crate::error::{Error, Result};
use crate::latentmodel::{
    cell_index, observed_loglik_tilted, posterior_from_terms, q_gradient_tilted, row_terms, LatentModelParams, ParamDoc,
    ThresholdRow, Tilt,
};
use crate::math::{logit, normal_quantile, par_map, par_sum, par_sum_vec};
use crate::optim::{lbfgs, weighted_least_squares, weighted_logistic, LbfgsOptions};

/// `w_i = P(H_i = 1 | row i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitControls {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    /// Iteration cap of the quasi-Newton threshold block.
    pub inner_max_iter: usize,
    /// Gradient tolerance of the threshold block (per-observation scale).
    pub inner_grad_tol: f64,
    /// Include the start built from decision-indicator weights.
    pub warm_start: bool,
}

impl Default for FitControls {
    fn default() -> Self {
        FitControls {
            max_iter: 500,
            rel_tol: 1e-8,
            n_starts: 5,
            seed: 0,
            inner_max_iter: 200,
            inner_grad_tol: 1e-6,
            warm_start: true,
        }
    }
}

/// Result of one M-step.
#[derive(Debug, Clone)]
pub(crate) struct MStep<P> {
    pub params: P,
    pub warnings: Vec<String>,
}

/// A latent binary-class model fitted by EM on a fixed dataset.
pub(crate) trait EmModel: Sync {
    type Params: Clone + Send + Sync;

    fn n_rows(&self) -> usize;
    fn to_vec(&self, p: &Self::Params) -> Vec<f64>;
    fn with_values(&self, template: &Self::Params, v: &[f64]) -> Result<Self::Params>;
    /// Complete-data log terms `log P(H = h, observed row)` for `h = 0, 1`.
    fn row_terms(&self, p: &Self::Params, i: usize) -> Result<[f64; 2]>;
    /// Gradient of `Q(p | w)`.
    fn q_gradient(&self, p: &Self::Params, w: &[f64]) -> Result<Vec<f64>>;
    fn m_step(&self, p: &Self::Params, w: &[f64], controls: &FitControls) -> Result<MStep<Self::Params>>;
}

#[inline]
pub(crate) fn weighted_terms(ll: [f64; 2], w: f64) -> f64 {
    let mut q = 0.0;
    if w < 1.0 {
        q += (1.0 - w) * ll[0];
    }
    if w > 0.0 {
        q += w * ll[1];
    }
    q
}

pub(crate) fn e_step_generic<M: EmModel>(model: &M, p: &M::Params) -> Result<(Vec<f64>, f64)> {
    let rows = par_map(model.n_rows(), |i| {
        let ll = model.row_terms(p, i).map_err(|e| e.at_row(i))?;
        let lse = crate::math::log_add_exp(ll[0], ll[1]);
        if !lse.is_finite() {
            return Err(Error::Fitting(format!("row {i} has zero likelihood")));
        }
        Ok((posterior_from_terms(ll), lse))
    })?;
    let w: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let ll = par_sum(rows.len(), |i| Ok(rows[i].1))?;
    Ok((w, ll))
}

pub(crate) fn q_value_generic<M: EmModel>(model: &M, p: &M::Params, w: &[f64]) -> Result<f64> {
    par_sum(model.n_rows(), |i| Ok(weighted_terms(model.row_terms(p, i).map_err(|e| e.at_row(i))?, w[i])))
}

#[derive(Debug, Clone)]
pub(crate) struct EmRun<P> {
    pub params: P,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

pub(crate) fn run_em<M: EmModel>(model: &M, init: M::Params, controls: &FitControls) -> Result<EmRun<M::Params>> {
    let mut p = init;
    let (mut w, mut ll) = e_step_generic(model, &p)?;
    let mut trace = vec![ll];
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < controls.max_iter {
        iterations += 1;
        let ms = model.m_step(&p, &w, controls)?;
        for msg in ms.warnings {
            if !warnings.contains(&msg) {
                warnings.push(msg);
            }
        }
        let (w_new, ll_new) = e_step_generic(model, &ms.params)?;
        trace.push(ll_new);
        let change = (ll_new - ll).abs() / (1.0 + ll_new.abs());
        p = ms.params;
        w = w_new;
        ll = ll_new;
        if change < controls.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params: p,
        loglik: ll,
        trace,
        converged,
        iterations,
        warnings,
    })
}

/// Observed information by Oakes' identity; both second-derivative terms by
/// central differences of the Q-gradient with step `1e-4 * max(1, |theta_j|)`.
pub(crate) fn oakes_generic<M: EmModel>(model: &M, p: &M::Params) -> Result<DMatrix<f64>> {
    let theta = model.to_vec(p);
    let q = theta.len();
    let (w_hat, _) = e_step_generic(model, p)?;
    let mut m = DMatrix::<f64>::zeros(q, q);
    for j in 0..q {
        let h = 1e-4 * theta[j].abs().max(1.0);
        let shifted = |s: f64| -> Result<M::Params> {
            let mut v = theta.clone();
            v[j] += s * h;
            model.with_values(p, &v)
        };
        let (pu, pd) = (shifted(1.0)?, shifted(-1.0)?);
        let g1u = model.q_gradient(&pu, &w_hat)?;
        let g1d = model.q_gradient(&pd, &w_hat)?;
        let (wu, _) = e_step_generic(model, &pu)?;
        let (wd, _) = e_step_generic(model, &pd)?;
        let g2u = model.q_gradient(p, &wu)?;
        let g2d = model.q_gradient(p, &wd)?;
        for i in 0..q {
            m[(i, j)] = (g1u[i] - g1d[i] + g2u[i] - g2d[i]) / (2.0 * h);
        }
    }
    let info = -(&m + m.transpose()) * 0.5;
    for i in 0..q {
        for j in 0..q {
            if !info[(i, j)].is_finite() {
                return Err(Error::Information(i, j));
            }
        }
    }
    Ok(info)
}

/// Inverse (or pseudo-inverse) of an information matrix and whether the
/// pseudo-inverse was needed.
pub fn invert_information(info: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(ch) = info.clone().cholesky() {
        return (ch.inverse(), false);
    }
    let svd = info.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    match svd.pseudo_inverse(tol) {
        Ok(pinv) => (pinv, true),
        Err(_) => (DMatrix::from_element(info.nrows(), info.ncols(), f64::NAN), true),
    }
}

/// Standard errors `sqrt(diag(I^-1))`; NaN where the variance is not positive.
pub fn standard_errors(info: &DMatrix<f64>) -> (Vec<f64>, bool) {
    let (cov, pseudo) = invert_information(info);
    let se = (0..cov.nrows())
        .map(|i| {
            let v = cov[(i, i)];
            if v > 0.0 {
                v.sqrt()
            } else {
                f64::NAN
            }
        })
        .collect();
    (se, pseudo)
}

/// Observed information `-H` of a log-likelihood from central differences
/// of its gradient, symmetrized.
pub(crate) fn numeric_information<G>(theta: &[f64], grad: G) -> Result<DMatrix<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let q = theta.len();
    let mut m = DMatrix::<f64>::zeros(q, q);
    for j in 0..q {
        let h = 1e-4 * theta[j].abs().max(1.0);
        let mut up = theta.to_vec();
        up[j] += h;
        let mut dn = theta.to_vec();
        dn[j] -= h;
        let (gu, gd) = (grad(&up)?, grad(&dn)?);
        for i in 0..q {
            m[(i, j)] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    let info = -(&m + m.transpose()) * 0.5;
    if let Some((i, j)) = (0..q).flat_map(|i| (0..q).map(move |j| (i, j))).find(|&(i, j)| !info[(i, j)].is_finite()) {
        return Err(Error::Information(i, j));
    }
    Ok(info)
}

/// Point estimate with a normal-theory interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCi {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    /// The information matrix was singular and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

/// Delta-method intervals for a vector-valued functional of `theta`. The
/// gradient uses central differences with step `1e-5 * max(1, |theta_j|)`.
pub fn delta_core<F>(theta: &[f64], info: &DMatrix<f64>, functional: F, level: f64) -> Result<Vec<DeltaCi>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let q = theta.len();
    if info.nrows() != q || info.ncols() != q {
        return Err(Error::Shape("information matrix does not match the parameter vector".into()));
    }
    let estimate = functional(theta)?;
    let m = estimate.len();
    let mut grad = DMatrix::<f64>::zeros(m, q);
    for j in 0..q {
        let h = 1e-5 * theta[j].abs().max(1.0);
        let mut up = theta.to_vec();
        up[j] += h;
        let mut dn = theta.to_vec();
        dn[j] -= h;
        let fu = functional(&up)?;
        let fd = functional(&dn)?;
        for i in 0..m {
            grad[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    let (cov, pseudo) = invert_information(info);
    if pseudo {
        log::warn!("information matrix is singular; using a pseudo-inverse");
    }
    let z = normal_quantile(0.5 + 0.5 * level);
    Ok((0..m)
        .map(|i| {
            let g = grad.row(i);
            let var = (g * &cov * g.transpose())[(0, 0)];
            let se = var.max(0.0).sqrt();
            DeltaCi {
                estimate: estimate[i],
                se,
                lower: estimate[i] - z * se,
                upper: estimate[i] + z * se,
                pseudo_inverse: pseudo,
            }
        })
        .collect())
}

/// Brownian latent model on a dataset, optionally tilted.
pub(crate) struct BrownianEm<'a> {
    pub ds: &'a Dataset,
    pub tilt: Option<Tilt>,
}

impl<'a> BrownianEm<'a> {
    pub fn new(ds: &'a Dataset, tilt: Option<Tilt>) -> Self {
        BrownianEm {
            ds,
            tilt: tilt.filter(|t| !t.is_neutral()),
        }
    }
}

/// Design `[1, x, h]` for both `h` (`2n` rows: all `h = 0` rows, then `h = 1`).
fn expanded_design(ds: &Dataset) -> Vec<f64> {
    let (n, k) = (ds.n(), ds.k());
    let mut design = Vec::with_capacity(2 * n * (k + 2));
    for h in 0..2 {
        for i in 0..n {
            design.push(1.0);
            design.extend_from_slice(ds.row(i).x);
            design.push(h as f64);
        }
    }
    design
}

fn expanded_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| 1.0 - v).chain(w.iter().copied()).collect()
}

fn intercept_design(ds: &Dataset) -> Vec<f64> {
    let mut design = Vec::with_capacity(ds.n() * (ds.k() + 1));
    for i in 0..ds.n() {
        design.push(1.0);
        design.extend_from_slice(ds.row(i).x);
    }
    design
}

/// Value of the `H`-prior and `Z` blocks of `Q`.
fn pretreatment_q(p: &LatentModelParams, ds: &Dataset, w: &[f64]) -> Result<f64> {
    par_sum(ds.n(), |i| {
        let r = ds.row(i);
        Ok(weighted_terms(p.pretreatment_terms(r.x, r.z), w[i]))
    })
}

pub(crate) const CELL_PROB_CLAMP: f64 = 1e-10;

/// Closed-form outcome-cell update from weighted proportions.
pub(crate) fn cell_update(ds: &Dataset, w: &[f64], old: &[f64; 4]) -> [f64; 4] {
    let mut num = [0.0; 4];
    let mut den = [0.0; 4];
    for i in 0..ds.n() {
        let (a, y) = (ds.a()[i], ds.y()[i] as f64);
        for h in 0..2u8 {
            let wh = if h == 1 { w[i] } else { 1.0 - w[i] };
            let j = cell_index(h, a);
            num[j] += wh * y;
            den[j] += wh;
        }
    }
    let mut out = *old;
    for j in 0..4 {
        if den[j] > 0.0 {
            out[j] = logit((num[j] / den[j]).clamp(CELL_PROB_CLAMP, 1.0 - CELL_PROB_CLAMP));
        }
    }
    out
}

/// Update of the `H`-prior and `Z`-component blocks; the parts of the
/// M-step that do not involve the decision process.
pub(crate) fn pretreatment_update(
    p: &LatentModelParams,
    ds: &Dataset,
    w: &[f64],
    warnings: &mut Vec<String>,
) -> Result<LatentModelParams> {
    let (n, k) = (ds.n(), ds.k());
    let mut next = p.clone();

    let design = intercept_design(ds);
    let ones = vec![1.0; n];
    let fit = weighted_logistic(&design, k + 1, w, &ones, Some(&p.eta_h))?;
    if fit.ridge_used {
        warnings.push("h_prior: separable labels, ridge fallback used".into());
    }
    next.eta_h = fit.coef;

    let design2 = expanded_design(ds);
    let w2 = expanded_weights(w);
    for (j, m) in next.z_models.iter_mut().enumerate() {
        let zcol: Vec<f64> = (0..n).map(|i| ds.row(i).z[j]).collect();
        let z2: Vec<f64> = zcol.iter().chain(&zcol).copied().collect();
        match m.kind {
            ColumnKind::Binary => {
                let fit = weighted_logistic(&design2, k + 2, &z2, &w2, Some(&m.coef))?;
                if fit.ridge_used {
                    warnings.push(format!("z[{j}]: separable labels, ridge fallback used"));
                }
                m.coef = fit.coef;
            }
            ColumnKind::Continuous => {
                let coef = weighted_least_squares(&design2, k + 2, &z2, &w2)?;
                let mut ss = 0.0;
                let mut tot = 0.0;
                for ((row, &zv), &wv) in design2.chunks_exact(k + 2).zip(&z2).zip(&w2) {
                    let r = zv - crate::math::dot(row, &coef);
                    ss += wv * r * r;
                    tot += wv;
                }
                m.coef = coef;
                m.log_var = (ss / tot).max(1e-300).ln();
            }
        }
    }
    // keep the old blocks if the update did not improve Q (cannot happen for
    // exact solvers, guards against numerical trouble)
    if pretreatment_q(&next, ds, w)? < pretreatment_q(p, ds, w)? - 1e-10 {
        warnings.push("pretreatment blocks: update rejected".into());
        next.eta_h = p.eta_h.clone();
        next.z_models = p.z_models.clone();
    }
    Ok(next)
}

/// Value and gradient of the threshold block of `Q` in
/// `(beta_b, beta_c, delta0, delta1)`.
pub(crate) fn threshold_q(p: &LatentModelParams, ds: &Dataset, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (k, pz) = (ds.k(), ds.p());
    let dim = (1 + k) + (1 + k + pz) + 2;
    let d = p.drifts();
    let out = par_sum_vec(ds.n(), dim + 1, |i, acc| {
        let r = ds.row(i);
        let thr = ThresholdRow::new(p.log_b(r.x), p.logit_c(r.x, r.z), r.a, r.t).map_err(|e| e.at_row(i))?;
        let (mut v, mut glb, mut glc, mut gd0, mut gd1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for h in 0..2usize {
            let wh = if h == 1 { w[i] } else { 1.0 - w[i] };
            if wh == 0.0 {
                continue;
            }
            v += wh * thr.log_g(d[h]);
            let [a, b, c] = thr.grad(d[h]);
            glb += wh * a;
            glc += wh * b;
            gd0 += wh * c * d[h];
            if h == 1 {
                gd1 += wh * c * d[h];
            }
        }
        acc[0] += v;
        let g = &mut acc[1..];
        g[0] += glb;
        for (o, x) in g[1..=k].iter_mut().zip(r.x) {
            *o += glb * x;
        }
        let c0 = 1 + k;
        g[c0] += glc;
        for (o, x) in g[c0 + 1..c0 + 1 + k].iter_mut().zip(r.x) {
            *o += glc * x;
        }
        for (o, z) in g[c0 + 1 + k..c0 + 1 + k + pz].iter_mut().zip(r.z) {
            *o += glc * z;
        }
        g[dim - 2] += gd0;
        g[dim - 1] += gd1;
        Ok(())
    })?;
    Ok((out[0], out[1..].to_vec()))
}

pub(crate) fn threshold_vec(p: &LatentModelParams) -> Vec<f64> {
    let mut v = p.beta_b.clone();
    v.extend_from_slice(&p.beta_c);
    v.extend_from_slice(&p.delta);
    v
}

pub(crate) fn set_threshold(p: &mut LatentModelParams, v: &[f64]) {
    let kb = p.beta_b.len();
    let kc = p.beta_c.len();
    p.beta_b.copy_from_slice(&v[..kb]);
    p.beta_c.copy_from_slice(&v[kb..kb + kc]);
    p.delta.copy_from_slice(&v[kb + kc..kb + kc + 2]);
}

pub(crate) fn threshold_update(
    p: &LatentModelParams,
    ds: &Dataset,
    w: &[f64],
    controls: &FitControls,
    warnings: &mut Vec<String>,
) -> Result<LatentModelParams> {
    let scale = 1.0 / ds.n() as f64;
    let start = threshold_vec(p);
    let (q_old, _) = threshold_q(p, ds, w)?;
    let mut trial = p.clone();
    let res = lbfgs(
        |v| {
            set_threshold(&mut trial, v);
            let (q, g) = threshold_q(&trial, ds, w)?;
            Ok((-q * scale, g.iter().map(|x| -x * scale).collect()))
        },
        &start,
        &LbfgsOptions {
            max_iter: controls.inner_max_iter,
            grad_tol: controls.inner_grad_tol,
            memory: 10,
        },
    )?;
    if res.line_search_failed {
        warnings.push("threshold block: line search failed, best iterate kept".into());
    }
    let mut next = p.clone();
    set_threshold(&mut next, &res.x);
    if -res.value / scale < q_old - 1e-10 {
        warnings.push("threshold block: update rejected".into());
        return Ok(p.clone());
    }
    Ok(next)
}

/// Value and gradient of the tilted threshold-plus-cells part of `Q`.
fn tilted_block_q(p: &LatentModelParams, ds: &Dataset, w: &[f64], tilt: &Tilt) -> Result<(f64, Vec<f64>)> {
    let blocks = p.blocks();
    let value = par_sum(ds.n(), |i| {
        let r = ds.row(i);
        let ll = row_terms(p, &r, Some(tilt)).map_err(|e| e.at_row(i))?;
        let pre = p.pretreatment_terms(r.x, r.z);
        Ok(weighted_terms([ll[0] - pre[0], ll[1] - pre[1]], w[i]))
    })?;
    let g = q_gradient_tilted(p, ds, w, Some(tilt))?;
    let mut out = g[blocks.threshold()].to_vec();
    out.extend_from_slice(&g[blocks.cells.clone()]);
    Ok((value, out))
}

fn tilted_update(
    p: &LatentModelParams,
    ds: &Dataset,
    w: &[f64],
    tilt: &Tilt,
    controls: &FitControls,
    warnings: &mut Vec<String>,
) -> Result<LatentModelParams> {
    let scale = 1.0 / ds.n() as f64;
    let mut start = threshold_vec(p);
    start.extend_from_slice(&p.cells);
    let nthr = start.len() - 4;
    let (q_old, _) = tilted_block_q(p, ds, w, tilt)?;
    let mut trial = p.clone();
    let res = lbfgs(
        |v| {
            set_threshold(&mut trial, &v[..nthr]);
            trial.cells.copy_from_slice(&v[nthr..]);
            let (q, g) = tilted_block_q(&trial, ds, w, tilt)?;
            Ok((-q * scale, g.iter().map(|x| -x * scale).collect()))
        },
        &start,
        &LbfgsOptions {
            max_iter: controls.inner_max_iter,
            grad_tol: controls.inner_grad_tol,
            memory: 10,
        },
    )?;
    if res.line_search_failed {
        warnings.push("tilted block: line search failed, best iterate kept".into());
    }
    if -res.value / scale < q_old - 1e-10 {
        warnings.push("tilted block: update rejected".into());
        return Ok(p.clone());
    }
    let mut next = p.clone();
    set_threshold(&mut next, &res.x[..nthr]);
    next.cells.copy_from_slice(&res.x[nthr..]);
    Ok(next)
}

impl EmModel for BrownianEm<'_> {
    type Params = LatentModelParams;

    fn n_rows(&self) -> usize {
        self.ds.n()
    }

    fn to_vec(&self, p: &LatentModelParams) -> Vec<f64> {
        p.to_vec()
    }

    fn with_values(&self, template: &LatentModelParams, v: &[f64]) -> Result<LatentModelParams> {
        template.with_values(v)
    }

    fn row_terms(&self, p: &LatentModelParams, i: usize) -> Result<[f64; 2]> {
        row_terms(p, &self.ds.row(i), self.tilt.as_ref())
    }

    fn q_gradient(&self, p: &LatentModelParams, w: &[f64]) -> Result<Vec<f64>> {
        q_gradient_tilted(p, self.ds, w, self.tilt.as_ref())
    }

    fn m_step(&self, p: &LatentModelParams, w: &[f64], controls: &FitControls) -> Result<MStep<LatentModelParams>> {
        let mut warnings = Vec::new();
        let mut next = pretreatment_update(p, self.ds, w, &mut warnings)?;
        next = match &self.tilt {
            None => {
                next.cells = cell_update(self.ds, w, &p.cells);
                threshold_update(&next, self.ds, w, controls, &mut warnings)?
            }
            Some(tilt) => tilted_update(&next, self.ds, w, tilt, controls, &mut warnings)?,
        };
        Ok(MStep {
            params: next,
            warnings,
        })
    }
}

pub fn e_step(params: &LatentModelParams, ds: &Dataset) -> Result<PosteriorWeights> {
    params.check_schema(ds.schema())?;
    let (w, _) = e_step_generic(&BrownianEm::new(ds, None), params)?;
    Ok(PosteriorWeights { w })
}

pub fn m_step(params: &LatentModelParams, ds: &Dataset, weights: &PosteriorWeights) -> Result<LatentModelParams> {
    params.check_schema(ds.schema())?;
    if weights.w.len() != ds.n() {
        return Err(Error::Shape("one posterior weight per row is required".into()));
    }
    let ms = BrownianEm::new(ds, None).m_step(params, &weights.w, &FitControls::default())?;
    for msg in &ms.warnings {
        log::warn!("{msg}");
    }
    Ok(ms.params)
}

/// Expected complete-data log-likelihood `Q(params | weights)`.
pub fn q_value(params: &LatentModelParams, ds: &Dataset, weights: &PosteriorWeights) -> Result<f64> {
    q_value_generic(&BrownianEm::new(ds, None), params, &weights.w)
}

pub fn oakes_information(params: &LatentModelParams, ds: &Dataset) -> Result<DMatrix<f64>> {
    params.check_schema(ds.schema())?;
    oakes_generic(&BrownianEm::new(ds, None), params)
}

/// How EM is started.
#[derive(Debug, Clone, PartialEq)]
pub enum FitInit {
    /// A single run from the given parameters.
    Params(LatentModelParams),
    /// `n_starts` seeded random starts plus, if enabled, a warm start.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: LatentModelParams,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub info: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub se: Vec<f64>,
    /// Index of the winning start (0 = warm start when enabled).
    pub start: usize,
    pub warnings: Vec<String>,
    pub tilt: Option<Tilt>,
}

/// Serialized form of [`FitResult`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDoc {
    pub params: ParamDoc,
    pub se: ParamDoc,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub start: usize,
    pub warnings: Vec<String>,
    pub tilt: Option<Tilt>,
    pub info: Vec<Vec<f64>>,
}

impl FitResult {
    pub fn theta(&self) -> Vec<f64> {
        self.params.to_vec()
    }

    pub fn to_doc(&self, schema: &ColumnSchema) -> Result<FitDoc> {
        let q = self.info.nrows();
        Ok(FitDoc {
            params: self.params.to_doc(schema)?,
            se: self.params.doc_of(schema, &self.se)?,
            loglik: self.loglik,
            loglik_trace: self.loglik_trace.clone(),
            converged: self.converged,
            iterations: self.iterations,
            start: self.start,
            warnings: self.warnings.clone(),
            tilt: self.tilt,
            info: (0..q).map(|i| (0..q).map(|j| self.info[(i, j)]).collect()).collect(),
        })
    }

    pub fn from_doc(doc: &FitDoc, schema: &ColumnSchema) -> Result<FitResult> {
        let params = LatentModelParams::from_doc(&doc.params, schema)?;
        let q = params.n_params();
        if doc.info.len() != q || doc.info.iter().any(|r| r.len() != q) {
            return Err(Error::Config(format!("information matrix must be {q}x{q}")));
        }
        let info = DMatrix::from_fn(q, q, |i, j| doc.info[i][j]);
        let se_params = params.labels(schema)?;
        let se = se_params
            .iter()
            .map(|(b, n)| doc.se.get(b).and_then(|m| m.get(n)).copied().unwrap_or(f64::NAN))
            .collect();
        Ok(FitResult {
            params,
            loglik: doc.loglik,
            loglik_trace: doc.loglik_trace.clone(),
            info,
            converged: doc.converged,
            iterations: doc.iterations,
            se,
            start: doc.start,
            warnings: doc.warnings.clone(),
            tilt: doc.tilt,
        })
    }
}

/// Delta-method interval for a scalar functional of the fitted parameters.
pub fn delta_ci<F>(fit: &FitResult, functional: F, level: f64) -> Result<DeltaCi>
where
    F: Fn(&LatentModelParams) -> Result<f64>,
{
    let out = delta_ci_vec(fit, |p| Ok(vec![functional(p)?]), level)?;
    Ok(out[0])
}

/// Delta-method intervals for a vector functional, sharing one gradient pass.
pub fn delta_ci_vec<F>(fit: &FitResult, functional: F, level: f64) -> Result<Vec<DeltaCi>>
where
    F: Fn(&LatentModelParams) -> Result<Vec<f64>>,
{
    let template = &fit.params;
    delta_core(&fit.theta(), &fit.info, |v| functional(&template.with_values(v)?), level)
}

pub(crate) fn random_start(template: &LatentModelParams, ds: &Dataset, rng: &mut ChaCha8Rng) -> LatentModelParams {
    let normal = Normal::new(0.0, 0.25).expect("valid normal");
    let mut p = template.clone();
    for v in p.eta_h.iter_mut().chain(p.beta_b.iter_mut()).chain(p.beta_c.iter_mut()) {
        *v = normal.sample(rng);
    }
    for (j, m) in p.z_models.iter_mut().enumerate() {
        for v in m.coef.iter_mut() {
            *v = normal.sample(rng);
        }
        if m.kind == ColumnKind::Continuous {
            let col: Vec<f64> = (0..ds.n()).map(|i| ds.row(i).z[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            m.log_var = var.max(1e-8).ln();
        }
    }
    p.delta = [0.0, 0.0];
    let ybar = ds.y().iter().map(|&v| v as f64).sum::<f64>() / ds.n() as f64;
    let cell = logit(ybar.clamp(CELL_PROB_CLAMP, 1.0 - CELL_PROB_CLAMP));
    p.cells = [cell; 4];
    p
}

/// Start built by one M-step with the decision indicator as the posterior.
fn warm_start<M: EmModel<Params = LatentModelParams>>(
    model: &M,
    base: &LatentModelParams,
    ds: &Dataset,
    controls: &FitControls,
) -> Result<LatentModelParams> {
    let w: Vec<f64> = ds.a().iter().map(|&a| a as f64).collect();
    Ok(model.m_step(base, &w, controls)?.params)
}

pub(crate) fn fit_with_model<M: EmModel<Params = LatentModelParams>>(
    model: &M,
    ds: &Dataset,
    init: FitInit,
    controls: &FitControls,
) -> Result<(EmRun<LatentModelParams>, usize)> {
    let starts: Vec<Result<LatentModelParams>> = match init {
        FitInit::Params(p) => {
            p.check_schema(ds.schema())?;
            p.validate()?;
            vec![Ok(p)]
        }
        FitInit::Random => {
            let template = LatentModelParams::for_schema(ds.schema());
            let mut v = Vec::new();
            let mut rng0 = ChaCha8Rng::seed_from_u64(controls.seed);
            if controls.warm_start {
                let base = random_start(&template, ds, &mut rng0);
                let mut neutral = base.clone();
                neutral.eta_h.iter_mut().for_each(|x| *x = 0.0);
                v.push(warm_start(model, &neutral, ds, controls));
            }
            for s in 0..controls.n_starts {
                let mut rng = ChaCha8Rng::seed_from_u64(controls.seed);
                rng.set_stream(s as u64 + 1);
                v.push(Ok(random_start(&template, ds, &mut rng)));
            }
            v
        }
    };
    let mut best: Option<(EmRun<LatentModelParams>, usize)> = None;
    let mut failures = Vec::new();
    for (idx, start) in starts.into_iter().enumerate() {
        let run = start.and_then(|p| run_em(model, p, controls));
        match run {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some((b, _)) => r.loglik > b.loglik,
                };
                if better {
                    best = Some((r, idx));
                }
            }
            Err(e) => failures.push(format!("start {idx}: {e}")),
        }
    }
    best.ok_or_else(|| Error::Fitting(format!("all starts failed: {}", failures.join("; "))))
}

pub(crate) fn finish_fit<M: EmModel<Params = LatentModelParams>>(
    model: &M,
    run: EmRun<LatentModelParams>,
    start: usize,
    tilt: Option<Tilt>,
) -> Result<FitResult> {
    let info = oakes_generic(model, &run.params)?;
    let (se, pseudo) = standard_errors(&info);
    let mut warnings = run.warnings;
    if pseudo {
        warnings.push("information matrix singular; standard errors from pseudo-inverse".into());
    }
    Ok(FitResult {
        params: run.params,
        loglik: run.loglik,
        loglik_trace: run.trace,
        info,
        converged: run.converged,
        iterations: run.iterations,
        se,
        start,
        warnings,
        tilt,
    })
}

pub(crate) fn fit_tilted(ds: &Dataset, init: FitInit, controls: &FitControls, tilt: Option<Tilt>) -> Result<FitResult> {
    let model = BrownianEm::new(ds, tilt);
    let (run, start) = fit_with_model(&model, ds, init, controls)?;
    finish_fit(&model, run, start, model.tilt)
}

/// EM maximum likelihood with multi-start, Oakes information and standard errors.
pub fn fit(ds: &Dataset, init: FitInit, controls: &FitControls) -> Result<FitResult> {
    fit_tilted(ds, init, controls, None)
}

/// Tilted observed log-likelihood, used to check tilted fits.
pub fn observed_loglik_with_tilt(params: &LatentModelParams, ds: &Dataset, tilt: &Tilt) -> Result<f64> {
    observed_loglik_tilted(params, ds, Some(tilt).filter(|t| !t.is_neutral()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latentmodel::observed_loglik;
    use crate::simlab::{reference_params, reference_scenario, simulate_dataset, SimConfig};

    fn small(n: usize, seed: u64) -> Dataset {
        simulate_dataset(&reference_scenario(n, seed)).unwrap().0
    }

    fn quick() -> FitControls {
        FitControls {
            n_starts: 1,
            ..FitControls::default()
        }
    }

    #[test]
    fn degenerate_prior_gives_unit_weights() {
        let ds = small(50, 1);
        let mut p = reference_params();
        p.eta_h = vec![800.0, 0.0, 0.0, 0.0];
        let w = e_step(&p, &ds).unwrap();
        assert!(w.w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_rows_get_identical_weights() {
        let ds = small(20, 2);
        let twice = ds.concat(&ds).unwrap();
        let w = e_step(&reference_params(), &twice).unwrap().w;
        for i in 0..20 {
            assert_eq!(w[i], w[i + 20]);
        }
    }

    #[test]
    fn well_separated_classes_are_recovered() {
        let mut p = reference_params();
        p.delta = [1.5, 0.0];
        let cfg = SimConfig {
            true_params: p.clone(),
            ..reference_scenario(2000, 3)
        };
        let (ds, truth) = simulate_dataset(&cfg).unwrap();
        let w = e_step(&p, &ds).unwrap().w;
        let err = w.iter().zip(&truth.h).map(|(w, &h)| (w - h as f64).abs()).sum::<f64>() / ds.n() as f64;
        assert!(err < 0.05, "mean |w - h| = {err}");
    }

    #[test]
    fn em_is_monotone_and_reaches_a_fixed_point() {
        let ds = small(600, 4);
        let f = fit(&ds, FitInit::Random, &quick()).unwrap();
        assert!(f.converged);
        for w in f.loglik_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-8, "decrease {}", w[1] - w[0]);
        }
        // weakly identified directions may drift along a flat ridge, the loglik may not
        let again = fit(&ds, FitInit::Params(f.params.clone()), &quick()).unwrap();
        assert!(again.loglik >= f.loglik - 1e-8);
        assert!(again.loglik - f.loglik < 1e-3, "{} vs {}", again.loglik, f.loglik);
        let ll = observed_loglik(&f.params, &ds).unwrap();
        assert!((ll - f.loglik).abs() < 1e-9 * ll.abs());
    }

    #[test]
    fn fits_are_deterministic() {
        let ds = small(300, 5);
        let a = fit(&ds, FitInit::Random, &quick()).unwrap();
        let b = fit(&ds, FitInit::Random, &quick()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oakes_matches_second_differences_of_the_loglik() {
        let ds = small(250, 6);
        let p = reference_params();
        let info = oakes_information(&p, &ds).unwrap();
        let theta = p.to_vec();
        let q = theta.len();
        let ll = |v: &[f64]| observed_loglik(&p.with_values(v).unwrap(), &ds).unwrap();
        let h = 1e-3;
        let f0 = ll(&theta);
        let mut direct = DMatrix::<f64>::zeros(q, q);
        for i in 0..q {
            for j in 0..=i {
                let at = |si: f64, sj: f64| {
                    let mut v = theta.clone();
                    v[i] += si * h;
                    v[j] += sj * h;
                    ll(&v)
                };
                let d = if i == j {
                    (at(1.0, 0.0) - 2.0 * f0 + at(-1.0, 0.0)) / (h * h)
                } else {
                    (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h)
                };
                direct[(i, j)] = -d;
                direct[(j, i)] = -d;
            }
        }
        let rel = (&info - &direct).norm() / direct.norm();
        assert!(rel < 1e-3, "relative Frobenius difference {rel}");
    }

    #[test]
    fn duplicated_data_doubles_information() {
        let ds = small(150, 7);
        let twice = ds.concat(&ds).unwrap();
        let p = reference_params();
        let a = oakes_information(&p, &ds).unwrap();
        let b = oakes_information(&p, &twice).unwrap();
        assert!((&b - &a * 2.0).norm() < 1e-6 * b.norm());
    }

    #[test]
    fn delta_method_identity_and_linear_functionals() {
        let info = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let cov = info.clone().try_inverse().unwrap();
        let theta = [0.3, -1.2, 2.0];
        let id = delta_core(&theta, &info, |v| Ok(v.to_vec()), 0.95).unwrap();
        for j in 0..3 {
            assert!((id[j].se - cov[(j, j)].sqrt()).abs() < 1e-8);
            assert_eq!(id[j].estimate, theta[j]);
        }
        let a = nalgebra::DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let lin = delta_core(&theta, &info, |v| Ok(vec![v[0] - 2.0 * v[1] + 0.5 * v[2]]), 0.95).unwrap();
        let want = (a.transpose() * &cov * &a)[(0, 0)].sqrt();
        assert!((lin[0].se - want).abs() < 1e-8);
        assert!((lin[0].upper - lin[0].estimate - 1.959963984540054 * want).abs() < 1e-8);
    }

    #[test]
    fn singular_information_uses_pseudo_inverse() {
        let info = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, pseudo) = invert_information(&info);
        assert!(pseudo);
    }

    #[test]
    fn fit_document_round_trips() {
        let ds = small(200, 8);
        let f = fit(&ds, FitInit::Random, &FitControls { n_starts: 0, ..quick() }).unwrap();
        let doc = f.to_doc(ds.schema()).unwrap();
        let text = serde_json::to_string(&doc).unwrap();
        let back = FitResult::from_doc(&serde_json::from_str(&text).unwrap(), ds.schema()).unwrap();
        assert_eq!(back.theta(), f.theta());
        assert_eq!(back.info, f.info);
    }
}
