//! Parametric model of `(X, H, Z, T, A, Y)` with a binary latent `H`.
//!
//! Per row, given covariates `x` and initial observations `z`:
//!
//! ```text
//! P(H = 1 | x)       = sigmoid(eta_h · [1, x])
//! Z_j | x, h         ~ Bernoulli(sigmoid(m)) or Normal(m, exp(log_var)),  m = coef_j · [1, x, h]
//! b(x)               = exp(beta_b · [1, x])
//! c(x, z)            = sigmoid(beta_c · [1, x, z])
//! d(0) = -exp(delta0),  d(1) = exp(delta0 + delta1)
//! (A, T) | x, z, h   ~ first passage with (b, c, d(h))
//! P(Y = 1 | h, a)    = sigmoid(cells[h + 2a])
//! ```
//!
//! Parameters flatten to a single vector in the order
//! `eta_h, z_1 .. z_p, beta_b, beta_c, delta, cells`; continuous `Z`
//! components append their log-variance after the coefficients.

use std::ops::Range;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, ColumnSchema, Dataset, Row};
use crate::error::{Error, Result};
use crate::fpt::{self, boundary_geometry, Boundary, FptSpec, StdDensity};
use crate::math::{bernoulli_logit_ll, dot, log_add_exp, log_sigmoid, par_sum, par_sum_vec, sigmoid, LN_2PI};

#[derive(Debug, Clone, PartialEq)]
pub struct ZModel {
    pub kind: ColumnKind,
    /// `[intercept, x_1..x_k, h]`.
    pub coef: Vec<f64>,
    /// Log of the residual variance; unused for binary components.
    pub log_var: f64,
}

impl ZModel {
    pub(crate) fn n_params(&self) -> usize {
        self.coef.len() + usize::from(self.kind == ColumnKind::Continuous)
    }

    #[inline]
    pub(crate) fn mean(&self, x: &[f64], h: u8) -> f64 {
        self.coef[0] + dot(&self.coef[1..=x.len()], x) + self.coef[x.len() + 1] * h as f64
    }

    #[inline]
    pub(crate) fn loglik(&self, x: &[f64], z: f64, h: u8) -> f64 {
        let m = self.mean(x, h);
        match self.kind {
            ColumnKind::Binary => bernoulli_logit_ll(z == 1.0, m),
            ColumnKind::Continuous => {
                let r = z - m;
                -0.5 * (LN_2PI + self.log_var + r * r * (-self.log_var).exp())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModelParams {
    /// `[intercept, x_1..x_k]` for `logit P(H = 1 | x)`.
    pub eta_h: Vec<f64>,
    pub z_models: Vec<ZModel>,
    /// `[intercept, x_1..x_k]` for `log b`.
    pub beta_b: Vec<f64>,
    /// `[intercept, x_1..x_k, z_1..z_p]` for `logit c`.
    pub beta_c: Vec<f64>,
    /// `(delta0, delta1)`.
    pub delta: [f64; 2],
    /// Outcome logits indexed by `h + 2a`.
    pub cells: [f64; 4],
}

/// Index ranges of each block in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRanges {
    pub eta_h: Range<usize>,
    pub z: Vec<Range<usize>>,
    pub beta_b: Range<usize>,
    pub beta_c: Range<usize>,
    pub delta: Range<usize>,
    pub cells: Range<usize>,
}

impl BlockRanges {
    /// Threshold block: `beta_b`, `beta_c`, `delta` (contiguous).
    pub fn threshold(&self) -> Range<usize> {
        self.beta_b.start..self.delta.end
    }
}

/// Named-parameter document: block name → column name → value.
pub type ParamDoc = IndexMap<String, IndexMap<String, f64>>;

pub const CELL_NAMES: [&str; 4] = ["h0_a0", "h1_a0", "h0_a1", "h1_a1"];

#[inline]
pub fn cell_index(h: u8, a: u8) -> usize {
    h as usize + 2 * a as usize
}

impl LatentModelParams {
    /// All-zero parameters for `k` covariates and the given `Z` kinds.
    pub fn zeros(k: usize, z_kinds: &[ColumnKind]) -> Self {
        LatentModelParams {
            eta_h: vec![0.0; 1 + k],
            z_models: z_kinds
                .iter()
                .map(|&kind| ZModel {
                    kind,
                    coef: vec![0.0; k + 2],
                    log_var: 0.0,
                })
                .collect(),
            beta_b: vec![0.0; 1 + k],
            beta_c: vec![0.0; 1 + k + z_kinds.len()],
            delta: [0.0; 2],
            cells: [0.0; 4],
        }
    }

    pub fn for_schema(schema: &ColumnSchema) -> Self {
        Self::zeros(schema.k(), &schema.z_kinds())
    }

    pub fn k(&self) -> usize {
        self.eta_h.len() - 1
    }

    pub fn p(&self) -> usize {
        self.z_models.len()
    }

    pub fn z_kinds(&self) -> Vec<ColumnKind> {
        self.z_models.iter().map(|m| m.kind).collect()
    }

    pub fn blocks(&self) -> BlockRanges {
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let eta_h = take(self.eta_h.len());
        let z = self.z_models.iter().map(|m| take(m.n_params())).collect();
        let beta_b = take(self.beta_b.len());
        let beta_c = take(self.beta_c.len());
        let delta = take(2);
        let cells = take(4);
        BlockRanges {
            eta_h,
            z,
            beta_b,
            beta_c,
            delta,
            cells,
        }
    }

    pub fn n_params(&self) -> usize {
        self.blocks().cells.end
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.eta_h);
        for m in &self.z_models {
            v.extend_from_slice(&m.coef);
            if m.kind == ColumnKind::Continuous {
                v.push(m.log_var);
            }
        }
        v.extend_from_slice(&self.beta_b);
        v.extend_from_slice(&self.beta_c);
        v.extend_from_slice(&self.delta);
        v.extend_from_slice(&self.cells);
        v
    }

    /// Parameters with the same layout as `self` and values from `v`.
    pub fn with_values(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                self.n_params()
            )));
        }
        let mut out = self.clone();
        let mut it = v.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().unwrap_or(f64::NAN));
        fill(&mut out.eta_h);
        for m in &mut out.z_models {
            fill(&mut m.coef);
            if m.kind == ColumnKind::Continuous {
                let mut lv = [0.0];
                fill(&mut lv);
                m.log_var = lv[0];
            }
        }
        fill(&mut out.beta_b);
        fill(&mut out.beta_c);
        fill(&mut out.delta);
        fill(&mut out.cells);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let p = self.p();
        if self.beta_b.len() != 1 + k || self.beta_c.len() != 1 + k + p {
            return Err(Error::Shape("threshold coefficient lengths do not match k and p".into()));
        }
        if self.z_models.iter().any(|m| m.coef.len() != k + 2) {
            return Err(Error::Shape("z-model coefficient length must be k + 2".into()));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::ParamDomain("all parameters must be finite".into()));
        }
        Ok(())
    }

    /// Check that the layout matches a schema.
    pub fn check_schema(&self, schema: &ColumnSchema) -> Result<()> {
        if self.k() != schema.k() || self.z_kinds() != schema.z_kinds() {
            return Err(Error::Shape(format!(
                "parameters sized for k={}, p={} do not match schema k={}, p={}",
                self.k(),
                self.p(),
                schema.k(),
                schema.p()
            )));
        }
        Ok(())
    }

    /// `(block, name)` label for every flat parameter.
    pub fn labels(&self, schema: &ColumnSchema) -> Result<Vec<(String, String)>> {
        self.check_schema(schema)?;
        let xs: Vec<String> = schema.x.iter().map(|c| c.name.clone()).collect();
        let zs: Vec<String> = schema.z.iter().map(|c| c.name.clone()).collect();
        let mut out = Vec::with_capacity(self.n_params());
        let mut push = |block: &str, names: &[String]| {
            for n in names {
                out.push((block.to_string(), n.clone()));
            }
        };
        let intercept = ["intercept".to_string()];
        let with_x: Vec<String> = intercept.iter().chain(&xs).cloned().collect();
        push("h_prior", &with_x);
        for (m, spec) in self.z_models.iter().zip(&schema.z) {
            let mut names = with_x.clone();
            names.push("h".into());
            if m.kind == ColumnKind::Continuous {
                names.push("log_var".into());
            }
            push(&format!("z.{}", spec.name), &names);
        }
        push("log_b", &with_x);
        let with_xz: Vec<String> = with_x.iter().chain(&zs).cloned().collect();
        push("logit_c", &with_xz);
        push("drift", &["delta0".into(), "delta1".into()]);
        push("cells", &CELL_NAMES.map(String::from));
        Ok(out)
    }

    /// Named document of `values` (same layout as `self`), keyed by block
    /// and column name.
    pub fn doc_of(&self, schema: &ColumnSchema, values: &[f64]) -> Result<ParamDoc> {
        let labels = self.labels(schema)?;
        if values.len() != labels.len() {
            return Err(Error::Shape("value vector does not match parameter layout".into()));
        }
        let mut doc = ParamDoc::new();
        for ((block, name), v) in labels.into_iter().zip(values) {
            doc.entry(block).or_default().insert(name, *v);
        }
        Ok(doc)
    }

    pub fn to_doc(&self, schema: &ColumnSchema) -> Result<ParamDoc> {
        self.doc_of(schema, &self.to_vec())
    }

    /// Parse a named document; every parameter must be present and no
    /// unknown entries are allowed.
    pub fn from_doc(doc: &ParamDoc, schema: &ColumnSchema) -> Result<Self> {
        let template = Self::for_schema(schema);
        let labels = template.labels(schema)?;
        let mut v = Vec::with_capacity(labels.len());
        for (block, name) in &labels {
            let val = doc
                .get(block)
                .and_then(|b| b.get(name))
                .ok_or_else(|| Error::Config(format!("parameter {block}.{name} is missing")))?;
            v.push(*val);
        }
        let count: usize = doc.values().map(|b| b.len()).sum();
        if count != labels.len() {
            for (block, entries) in doc {
                for name in entries.keys() {
                    if !labels.iter().any(|(b, n)| b == block && n == name) {
                        return Err(Error::Config(format!("unknown parameter {block}.{name}")));
                    }
                }
            }
        }
        let out = template.with_values(&v)?;
        out.validate()?;
        Ok(out)
    }

    #[inline]
    pub fn drifts(&self) -> [f64; 2] {
        [-self.delta[0].exp(), (self.delta[0] + self.delta[1]).exp()]
    }

    #[inline]
    pub fn cell_prob(&self, h: u8, a: u8) -> f64 {
        sigmoid(self.cells[cell_index(h, a)])
    }

    fn check_row(&self, row: &Row) -> Result<()> {
        if row.x.len() != self.k() || row.z.len() != self.p() {
            return Err(Error::Shape(format!(
                "row has k={}, p={} but parameters expect k={}, p={}",
                row.x.len(),
                row.z.len(),
                self.k(),
                self.p()
            )));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn eta(&self, x: &[f64]) -> f64 {
        self.eta_h[0] + dot(&self.eta_h[1..], x)
    }

    #[inline]
    pub(crate) fn log_b(&self, x: &[f64]) -> f64 {
        self.beta_b[0] + dot(&self.beta_b[1..], x)
    }

    #[inline]
    pub(crate) fn logit_c(&self, x: &[f64], z: &[f64]) -> f64 {
        let k = x.len();
        self.beta_c[0] + dot(&self.beta_c[1..=k], x) + dot(&self.beta_c[k + 1..], z)
    }

    /// `log P(z | x, h)` summed over components.
    #[inline]
    pub(crate) fn z_loglik(&self, x: &[f64], z: &[f64], h: u8) -> f64 {
        self.z_models.iter().zip(z).map(|(m, &zj)| m.loglik(x, zj, h)).sum()
    }

    /// `log P(H = h | x) + log P(z | x, h)` for both `h`.
    #[inline]
    pub(crate) fn pretreatment_terms(&self, x: &[f64], z: &[f64]) -> [f64; 2] {
        let eta = self.eta(x);
        [
            log_sigmoid(-eta) + self.z_loglik(x, z, 0),
            log_sigmoid(eta) + self.z_loglik(x, z, 1),
        ]
    }
}

/// Per-row quantities derived from the parameters through the link functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowLinks {
    pub b: f64,
    pub c: f64,
    /// Drift coefficients for `h = 0, 1`.
    pub d: [f64; 2],
    pub h_prior: f64,
    /// `log P(z | x, h)` for `h = 0, 1`.
    pub z_loglik: [f64; 2],
    /// `P(Y = 1 | h, a)` indexed `[h][a]`.
    pub y_prob: [[f64; 2]; 2],
}

impl RowLinks {
    pub fn spec(&self, h: u8) -> FptSpec {
        FptSpec {
            b: self.b,
            c: self.c,
            d: self.d[h as usize],
        }
    }
}

pub fn links_for_row(params: &LatentModelParams, row: &Row) -> Result<RowLinks> {
    params.check_row(row)?;
    Ok(RowLinks {
        b: params.log_b(row.x).exp(),
        c: sigmoid(params.logit_c(row.x, row.z)),
        d: params.drifts(),
        h_prior: sigmoid(params.eta(row.x)),
        z_loglik: [params.z_loglik(row.x, row.z, 0), params.z_loglik(row.x, row.z, 1)],
        y_prob: [
            [params.cell_prob(0, 0), params.cell_prob(0, 1)],
            [params.cell_prob(1, 0), params.cell_prob(1, 1)],
        ],
    })
}

/// Threshold-block quantities for one row; `ln f` does not depend on `h`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ThresholdRow {
    pub lb: f64,
    pub b2: f64,
    pub c: f64,
    pub w: f64,
    pub sign: f64,
    pub u: f64,
    pub t: f64,
    pub f: StdDensity,
}

impl ThresholdRow {
    pub fn new(lb: f64, lc: f64, a: u8, t: f64) -> Result<Self> {
        let b2 = (2.0 * lb).exp();
        let c = sigmoid(lc);
        if !(b2 > 0.0 && b2.is_finite() && c > 0.0 && c < 1.0) {
            return Err(Error::ParamDomain(format!("threshold links out of range: log b = {lb}, logit c = {lc}")));
        }
        let (w, sign) = boundary_geometry(c, Boundary::from_indicator(a));
        let u = t / b2;
        let f = fpt::std_density(u, w)?;
        Ok(ThresholdRow {
            lb,
            b2,
            c,
            w,
            sign,
            u,
            t,
            f,
        })
    }

    /// `ln g(a, t | b, c, d)`.
    #[inline]
    pub fn log_g(&self, d: f64) -> f64 {
        -2.0 * self.lb + self.f.ln_f + self.sign * d * self.w * self.b2 - 0.5 * d * d * self.b2 * self.t
    }

    /// Partial derivatives of `ln g` with respect to `(log b, logit c, d)`.
    #[inline]
    pub fn grad(&self, d: f64) -> [f64; 3] {
        let g_lb = -2.0 + 2.0 * self.sign * d * self.w * self.b2 - d * d * self.b2 * self.t - 2.0 * self.u * self.f.d_u;
        let dw_dlc = -self.sign * self.c * (1.0 - self.c);
        let g_lc = (self.sign * d * self.b2 + self.f.d_w) * dw_dlc;
        let g_d = self.sign * self.w * self.b2 - d * self.b2 * self.t;
        [g_lb, g_lc, g_d]
    }
}

/// Tilting factors `(psi0, psi1)` on the outcome given the decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tilt {
    pub psi0: f64,
    pub psi1: f64,
}

impl Tilt {
    pub const NEUTRAL: Tilt = Tilt { psi0: 1.0, psi1: 1.0 };

    pub fn new(psi0: f64, psi1: f64) -> Result<Self> {
        if !(psi0 > 0.0 && psi0.is_finite() && psi1 > 0.0 && psi1.is_finite()) {
            return Err(Error::ParamDomain(format!("tilting factors must be positive, got ({psi0}, {psi1})")));
        }
        Ok(Tilt { psi0, psi1 })
    }

    pub fn is_neutral(&self) -> bool {
        self.psi0 == 1.0 && self.psi1 == 1.0
    }

    #[inline]
    fn psi(&self, a: u8) -> f64 {
        if a == 1 {
            self.psi1
        } else {
            self.psi0
        }
    }

    /// `N_h = 1 + sum_a P_h(a) (psi_a - 1) pi(h, a)`: the normalizer of the
    /// tilted `(A, T, Y | h)` density.
    pub fn normalizer(&self, p1: f64, pi0: f64, pi1: f64) -> f64 {
        1.0 + p1 * (self.psi1 - 1.0) * pi1 + (1.0 - p1) * (self.psi0 - 1.0) * pi0
    }
}

/// `log P(H=h, z, a, t, y | x)` for `h = 0, 1`, optionally tilted.
pub(crate) fn row_terms(params: &LatentModelParams, row: &Row, tilt: Option<&Tilt>) -> Result<[f64; 2]> {
    params.check_row(row)?;
    let pre = params.pretreatment_terms(row.x, row.z);
    let lb = params.log_b(row.x);
    let lc = params.logit_c(row.x, row.z);
    let thr = ThresholdRow::new(lb, lc, row.a, row.t)?;
    let d = params.drifts();
    let mut out = [0.0; 2];
    for h in 0..2u8 {
        let cell = params.cells[cell_index(h, row.a)];
        let mut v = pre[h as usize] + thr.log_g(d[h as usize]) + bernoulli_logit_ll(row.y == 1, cell);
        if let Some(tl) = tilt {
            let p1 = fpt::upper_exit_prob(thr.b2.sqrt(), thr.c, d[h as usize]);
            let n = tl.normalizer(p1, params.cell_prob(h, 0), params.cell_prob(h, 1));
            v += row.y as f64 * tl.psi(row.a).ln() - n.ln();
        }
        out[h as usize] = v;
    }
    Ok(out)
}

/// `log[P(H=h|x) P(z|x,h) g(a,t|b,c,d_h) P(y|h,a)]`.
pub fn complete_loglik(params: &LatentModelParams, row: &Row, h: u8) -> Result<f64> {
    Ok(row_terms(params, row, None)?[h.min(1) as usize])
}

/// Total observed-data log-likelihood `sum_i log sum_h exp(complete_loglik)`.
pub fn observed_loglik(params: &LatentModelParams, ds: &Dataset) -> Result<f64> {
    observed_loglik_tilted(params, ds, None)
}

pub(crate) fn observed_loglik_tilted(params: &LatentModelParams, ds: &Dataset, tilt: Option<&Tilt>) -> Result<f64> {
    params.check_schema(ds.schema())?;
    par_sum(ds.n(), |i| {
        let ll = row_terms(params, &ds.row(i), tilt).map_err(|e| e.at_row(i))?;
        Ok(log_add_exp(ll[0], ll[1]))
    })
}

/// `P(H = 1 | row)` from the two complete-data terms.
#[inline]
pub(crate) fn posterior_from_terms(ll: [f64; 2]) -> f64 {
    (ll[1] - log_add_exp(ll[0], ll[1])).exp()
}

#[inline]
fn axpy(out: &mut [f64], alpha: f64, x0: f64, x: &[f64]) {
    out[0] += alpha * x0;
    for (o, v) in out[1..].iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Exit-probability partials with respect to `(log b, logit c, d)`.
fn exit_prob_grad(lb: f64, lc: f64, d: f64) -> [f64; 3] {
    let p = |lb: f64, lc: f64, d: f64| fpt::upper_exit_prob(lb.exp(), sigmoid(lc), d);
    let step = |v: f64| 1e-6 * v.abs().max(1.0);
    let (h0, h1, h2) = (step(lb), step(lc), step(d));
    [
        (p(lb + h0, lc, d) - p(lb - h0, lc, d)) / (2.0 * h0),
        (p(lb, lc + h1, d) - p(lb, lc - h1, d)) / (2.0 * h1),
        (p(lb, lc, d + h2) - p(lb, lc, d - h2)) / (2.0 * h2),
    ]
}

/// Adds `wh * grad [log P(H = h | x) + log P(z | x, h)]` into the `eta_h`
/// and `Z` ranges of `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn add_pretreatment_gradient(
    eta_h: &[f64],
    z_models: &[ZModel],
    eta_range: &Range<usize>,
    z_ranges: &[Range<usize>],
    x: &[f64],
    z: &[f64],
    h: u8,
    wh: f64,
    out: &mut [f64],
) {
    let k = x.len();
    let hf = h as f64;
    let eta = eta_h[0] + dot(&eta_h[1..], x);
    axpy(&mut out[eta_range.clone()], wh * (hf - sigmoid(eta)), 1.0, x);
    for (m, (range, &zj)) in z_models.iter().zip(z_ranges.iter().zip(z)) {
        let g = &mut out[range.clone()];
        let mean = m.mean(x, h);
        match m.kind {
            ColumnKind::Binary => {
                let r = wh * (zj - sigmoid(mean));
                axpy(&mut g[..=k], r, 1.0, x);
                g[k + 1] += r * hf;
            }
            ColumnKind::Continuous => {
                let iv = (-m.log_var).exp();
                let resid = zj - mean;
                let r = wh * resid * iv;
                axpy(&mut g[..=k], r, 1.0, x);
                g[k + 1] += r * hf;
                g[k + 2] += wh * (-0.5 + 0.5 * resid * resid * iv);
            }
        }
    }
}

/// Adds `sum_h weights[h] * grad complete_loglik(h)` for one row into `out`.
pub(crate) fn add_row_gradient(
    params: &LatentModelParams,
    blocks: &BlockRanges,
    row: &Row,
    weights: [f64; 2],
    tilt: Option<&Tilt>,
    out: &mut [f64],
) -> Result<()> {
    params.check_row(row)?;
    let (x, z) = (row.x, row.z);
    let k = x.len();
    let lb = params.log_b(x);
    let lc = params.logit_c(x, z);
    let thr = ThresholdRow::new(lb, lc, row.a, row.t)?;
    let d = params.drifts();
    for h in 0..2u8 {
        let wh = weights[h as usize];
        if wh == 0.0 {
            continue;
        }
        add_pretreatment_gradient(&params.eta_h, &params.z_models, &blocks.eta_h, &blocks.z, x, z, h, wh, out);
        let dh = d[h as usize];
        let [mut g_lb, mut g_lc, mut g_d] = thr.grad(dh);
        let j = cell_index(h, row.a);
        out[blocks.cells.start + j] += wh * (row.y as f64 - sigmoid(params.cells[j]));
        if let Some(tl) = tilt {
            let (pi0, pi1) = (params.cell_prob(h, 0), params.cell_prob(h, 1));
            let p1 = fpt::upper_exit_prob(thr.b2.sqrt(), thr.c, dh);
            let n = tl.normalizer(p1, pi0, pi1);
            let dn_dp1 = (tl.psi1 - 1.0) * pi1 - (tl.psi0 - 1.0) * pi0;
            let pg = exit_prob_grad(lb, lc, dh);
            g_lb -= dn_dp1 * pg[0] / n;
            g_lc -= dn_dp1 * pg[1] / n;
            g_d -= dn_dp1 * pg[2] / n;
            let c0 = cell_index(h, 0);
            let c1 = cell_index(h, 1);
            out[blocks.cells.start + c0] -= wh * (tl.psi0 - 1.0) * (1.0 - p1) * pi0 * (1.0 - pi0) / n;
            out[blocks.cells.start + c1] -= wh * (tl.psi1 - 1.0) * p1 * pi1 * (1.0 - pi1) / n;
        }
        axpy(&mut out[blocks.beta_b.clone()], wh * g_lb, 1.0, x);
        let bc = &mut out[blocks.beta_c.clone()];
        axpy(&mut bc[..=k], wh * g_lc, 1.0, x);
        for (o, v) in bc[k + 1..].iter_mut().zip(z) {
            *o += wh * g_lc * v;
        }
        out[blocks.delta.start] += wh * g_d * dh;
        if h == 1 {
            out[blocks.delta.start + 1] += wh * g_d * dh;
        }
    }
    Ok(())
}

/// Gradient of `Q(theta | weights) = sum_i sum_h w_ih complete_loglik_h(theta)`
/// where `w_i1 = weights[i]` and `w_i0 = 1 - weights[i]`.
pub fn q_gradient(params: &LatentModelParams, ds: &Dataset, weights: &[f64]) -> Result<Vec<f64>> {
    q_gradient_tilted(params, ds, weights, None)
}

pub(crate) fn q_gradient_tilted(
    params: &LatentModelParams,
    ds: &Dataset,
    weights: &[f64],
    tilt: Option<&Tilt>,
) -> Result<Vec<f64>> {
    params.check_schema(ds.schema())?;
    if weights.len() != ds.n() {
        return Err(Error::Shape("one posterior weight per row is required".into()));
    }
    let blocks = params.blocks();
    par_sum_vec(ds.n(), params.n_params(), |i, acc| {
        let w = weights[i];
        add_row_gradient(params, &blocks, &ds.row(i), [1.0 - w, w], tilt, acc).map_err(|e| e.at_row(i))
    })
}

/// Gradient of [`observed_loglik`] (Fisher's identity: the Q-gradient at the
/// current posterior weights).
pub fn observed_gradient(params: &LatentModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    observed_gradient_tilted(params, ds, None)
}

pub(crate) fn observed_gradient_tilted(params: &LatentModelParams, ds: &Dataset, tilt: Option<&Tilt>) -> Result<Vec<f64>> {
    params.check_schema(ds.schema())?;
    let blocks = params.blocks();
    par_sum_vec(ds.n(), params.n_params(), |i, acc| {
        let row = ds.row(i);
        let ll = row_terms(params, &row, tilt).map_err(|e| e.at_row(i))?;
        let w = posterior_from_terms(ll);
        add_row_gradient(params, &blocks, &row, [1.0 - w, w], tilt, acc).map_err(|e| e.at_row(i))
    })
}
