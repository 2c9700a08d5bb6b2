//! Synthetic data from the full model and Monte Carlo oracles.
//!
//! Dataset generation samples `(A, T)` exactly by inverting the first-passage
//! CDF. The Euler path simulator with a Brownian-bridge crossing correction
//! is kept as an independent check on the series densities, so neither
//! method validates itself.
//!
//! Randomness is drawn from ChaCha8 streams keyed by `(seed, chunk index)`,
//! so results do not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparators::LognormalParams;
use crate::data::{ColumnKind, ColumnSchema, ColumnSpec, Dataset};
use crate::effects::ShiftPolicy;
use crate::error::{Error, Result};
use crate::fpt::{self, Boundary, FptSpec};
use crate::latentmodel::{links_for_row, LatentModelParams, ZModel};
use crate::math::{logit, sigmoid, CHUNK};

/// Settings of the Euler path oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub bridge_correction: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            dt: 1e-4,
            n_paths: 1_000_000,
            bridge_correction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub schema: ColumnSchema,
    pub true_params: LatentModelParams,
    pub seed: u64,
    pub mc: McConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(self.mc.dt > 0.0) {
            return Err(Error::Config("mc.dt must be positive".into()));
        }
        self.schema.validate()?;
        self.true_params.check_schema(&self.schema)?;
        self.true_params.validate()
    }
}

/// Hidden per-row truth kept next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub h: Vec<u8>,
}

/// Schema of the reference scenario: three covariates (the last binary) and
/// two initial observations (the second binary).
pub fn reference_schema() -> ColumnSchema {
    ColumnSchema {
        x: vec![
            ColumnSpec::new("x1", ColumnKind::Continuous),
            ColumnSpec::new("x2", ColumnKind::Continuous),
            ColumnSpec::new("x3", ColumnKind::Binary),
        ],
        z: vec![ColumnSpec::new("z1", ColumnKind::Continuous), ColumnSpec::new("z2", ColumnKind::Binary)],
        t: "t".into(),
        a: "a".into(),
        y: "y".into(),
    }
}

fn cells_from_probs(pi00: f64, pi10: f64, pi01: f64, pi11: f64) -> [f64; 4] {
    [logit(pi00), logit(pi10), logit(pi01), logit(pi11)]
}

/// Parameters of the reference scenario (moderate confounding).
pub fn reference_params() -> LatentModelParams {
    LatentModelParams {
        eta_h: vec![-0.3, 0.5, -0.3, 0.4],
        z_models: vec![
            ZModel {
                kind: ColumnKind::Continuous,
                coef: vec![0.0, 0.3, 0.0, 0.2, 1.0],
                log_var: 0.0,
            },
            ZModel {
                kind: ColumnKind::Binary,
                coef: vec![-1.0, 0.2, 0.3, 0.0, 1.5],
                log_var: 0.0,
            },
        ],
        beta_b: vec![0.5, 0.1, -0.1, 0.05],
        beta_c: vec![-0.4, 0.1, 0.0, -0.1, 0.3, 0.2],
        delta: [0.0, 0.7],
        cells: cells_from_probs(0.10, 0.30, 0.15, 0.20),
    }
}

pub fn reference_scenario(n: usize, seed: u64) -> SimConfig {
    SimConfig {
        n,
        schema: reference_schema(),
        true_params: reference_params(),
        seed,
        mc: McConfig::default(),
    }
}

/// Random generator for chunk `chunk` of a run seeded by `seed`.
pub(crate) fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Pre-treatment part of one simulated unit.
#[derive(Debug, Clone)]
pub(crate) struct Unit {
    pub x: Vec<f64>,
    pub h: u8,
    pub z: Vec<f64>,
}

pub(crate) fn draw_covariates<R: Rng>(schema: &ColumnSchema, rng: &mut R) -> Vec<f64> {
    schema
        .x
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Continuous => rng.sample(StandardNormal),
            ColumnKind::Binary => f64::from(rng.random::<bool>()),
        })
        .collect()
}

pub(crate) fn draw_z<R: Rng>(models: &[ZModel], x: &[f64], h: u8, rng: &mut R) -> Vec<f64> {
    models
        .iter()
        .map(|m| {
            let mean = m.coef[0] + crate::math::dot(&m.coef[1..=x.len()], x) + m.coef[x.len() + 1] * h as f64;
            match m.kind {
                ColumnKind::Continuous => mean + (0.5 * m.log_var).exp() * rng.sample::<f64, _>(StandardNormal),
                ColumnKind::Binary => f64::from(rng.random::<f64>() < sigmoid(mean)),
            }
        })
        .collect()
}

pub(crate) fn draw_unit<R: Rng>(schema: &ColumnSchema, p: &LatentModelParams, rng: &mut R) -> Unit {
    let x = draw_covariates(schema, rng);
    let h = u8::from(rng.random::<f64>() < sigmoid(p.eta(&x)));
    let z = draw_z(&p.z_models, &x, h, rng);
    Unit { x, h, z }
}

fn row_spec(p: &LatentModelParams, x: &[f64], z: &[f64], h: u8) -> FptSpec {
    FptSpec {
        b: p.log_b(x).exp(),
        c: sigmoid(p.logit_c(x, z)),
        d: p.drifts()[h as usize],
    }
}

/// Draw a dataset and the hidden classes from the full model.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(Dataset, Truth)> {
    cfg.validate()?;
    let p = &cfg.true_params;
    let n_chunks = cfg.n.div_ceil(CHUNK);
    type Drawn = (Vec<f64>, Vec<f64>, f64, u8, u8, u8);
    let chunks: Vec<Vec<Drawn>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(cfg.seed, c as u64);
            let rows = CHUNK.min(cfg.n - c * CHUNK);
            (0..rows)
                .map(|_| {
                    let u = draw_unit(&cfg.schema, p, &mut rng);
                    let spec = row_spec(p, &u.x, &u.z, u.h);
                    let (a, t) = fpt::sample_fpt(&spec, &mut rng)?;
                    let a = a.indicator();
                    let y = u8::from(rng.random::<f64>() < p.cell_prob(u.h, a));
                    Ok((u.x, u.z, t, a, y, u.h))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (mut x, mut z, mut t, mut a, mut y, mut h) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (xi, zi, ti, ai, yi, hi) in chunks.into_iter().flatten() {
        x.extend(xi);
        z.extend(zi);
        t.push(ti);
        a.push(ai);
        y.push(yi);
        h.push(hi);
    }
    let ds = Dataset::from_columns(cfg.schema.clone(), x, z, t, a, y)?;
    Ok((ds, Truth { h }))
}

/// Draw a dataset from the lognormal latent model.
pub fn simulate_lognormal(
    n: usize,
    schema: &ColumnSchema,
    params: &LognormalParams,
    seed: u64,
) -> Result<(Dataset, Truth)> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    schema.validate()?;
    let shared = params.as_latent();
    shared.check_schema(schema)?;
    let sigma = params.sigma();
    let n_chunks = n.div_ceil(CHUNK);
    type Drawn = (Vec<f64>, Vec<f64>, f64, u8, u8, u8);
    let chunks: Vec<Vec<Drawn>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c as u64);
            let rows = CHUNK.min(n - c * CHUNK);
            (0..rows)
                .map(|_| {
                    let u = draw_unit(schema, &shared, &mut rng);
                    let m = params.time_mean(&u.x, &u.z, u.h) + 0.5 * sigma * sigma;
                    let t = (m + sigma * rng.sample::<f64, _>(StandardNormal)).exp();
                    let a = u8::from(rng.random::<f64>() < params.admit_prob(&u.x, &u.z, t, u.h));
                    let y = u8::from(rng.random::<f64>() < params.cell_prob(u.h, a));
                    (u.x, u.z, t, a, y, u.h)
                })
                .collect()
        })
        .collect();
    let (mut x, mut z, mut t, mut a, mut y, mut h) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (xi, zi, ti, ai, yi, hi) in chunks.into_iter().flatten() {
        x.extend(xi);
        z.extend(zi);
        t.push(ti);
        a.push(ai);
        y.push(yi);
        h.push(hi);
    }
    let ds = Dataset::from_columns(schema.clone(), x, z, t, a, y)?;
    Ok((ds, Truth { h }))
}

/// Options of [`mc_first_passage`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub bridge_correction: bool,
    pub bin_width: f64,
    /// Paths still inside at this time are censored; defaults to a horizon
    /// with negligible survival.
    pub t_max: Option<f64>,
    pub seed: u64,
}

/// Binned exit counts from simulated paths.
#[derive(Debug, Clone, PartialEq)]
pub struct McHistogram {
    pub n_paths: usize,
    pub bin_width: f64,
    pub t_max: f64,
    /// Exit counts per bin for the lower and upper boundary.
    pub counts: [Vec<u64>; 2],
    /// Total exits through each boundary before `t_max`.
    pub exits: [u64; 2],
    /// Paths that had not exited by `t_max`.
    pub censored: u64,
}

impl McHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts[0].len()
    }

    pub fn bin_bounds(&self, bin: usize) -> (f64, f64) {
        let lo = bin as f64 * self.bin_width;
        (lo, (lo + self.bin_width).min(self.t_max))
    }

    pub fn bin_of(&self, t: f64) -> usize {
        ((t / self.bin_width) as usize).min(self.n_bins() - 1)
    }

    /// Bin-averaged sub-density of exiting through `a` and its binomial SE.
    pub fn density(&self, a: Boundary, bin: usize) -> (f64, f64) {
        let (lo, hi) = self.bin_bounds(bin);
        let w = hi - lo;
        let n = self.n_paths as f64;
        let p = self.counts[a.indicator() as usize][bin] as f64 / n;
        (p / w, (p * (1.0 - p) / n).sqrt() / w)
    }

    /// Fraction of exits through `a` among paths exiting in `bin`, with SE.
    pub fn conditional_upper(&self, bin: usize) -> (f64, f64) {
        let up = self.counts[1][bin] as f64;
        let tot = up + self.counts[0][bin] as f64;
        let p = up / tot;
        (p, (p * (1.0 - p) / tot).sqrt())
    }

    /// Fraction of all paths exiting through `a`, with SE.
    pub fn exit_fraction(&self, a: Boundary) -> (f64, f64) {
        let n = self.n_paths as f64;
        let p = self.exits[a.indicator() as usize] as f64 / n;
        (p, (p * (1.0 - p) / n).sqrt())
    }
}

const PATHS_PER_SHARD: usize = 8192;

/// Euler simulation of the drifted Brownian motion on `(0, b)`. With the
/// bridge correction, a step that ends inside the interval is still counted
/// as an exit with probability `exp(-2 Δ₀ Δ₁ / dt)`, where `Δ₀, Δ₁` are the
/// distances of its endpoints to a boundary. Exits are recorded at the step
/// midpoint.
pub fn mc_first_passage(spec: &FptSpec, opts: &McOptions) -> Result<McHistogram> {
    spec.validate()?;
    if !(opts.dt > 0.0 && opts.dt <= 1e-3) {
        return Err(Error::Domain(format!("dt must lie in (0, 1e-3], got {}", opts.dt)));
    }
    if !(opts.bin_width > 0.0) || opts.n_paths == 0 {
        return Err(Error::Domain("bin width and path count must be positive".into()));
    }
    let t_max = opts.t_max.unwrap_or_else(|| fpt::negligible_tail_time(spec));
    let n_bins = (t_max / opts.bin_width).ceil() as usize;
    let (b, x0, mu) = (spec.b, spec.start(), spec.drift());
    let dt = opts.dt;
    let sq = dt.sqrt();
    let drift_step = mu * dt;
    let max_steps = (t_max / dt).floor() as u64;
    // skip bridge draws when the crossing probability is below e^-40
    let near = 20.0 * dt;

    let n_shards = opts.n_paths.div_ceil(PATHS_PER_SHARD);
    let shards: Vec<([Vec<u64>; 2], [u64; 2], u64)> = (0..n_shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = chunk_rng(opts.seed, s as u64);
            let mut counts = [vec![0u64; n_bins], vec![0u64; n_bins]];
            let mut exits = [0u64; 2];
            let mut censored = 0u64;
            let paths = PATHS_PER_SHARD.min(opts.n_paths - s * PATHS_PER_SHARD);
            for _ in 0..paths {
                let mut x = x0;
                let mut step = 0u64;
                let mut hit: Option<usize> = None;
                while step < max_steps {
                    let xn = x + drift_step + sq * rng.sample::<f64, _>(StandardNormal);
                    step += 1;
                    if xn <= 0.0 {
                        hit = Some(0);
                    } else if xn >= b {
                        hit = Some(1);
                    } else if opts.bridge_correction {
                        let (lo0, lo1) = (x, xn);
                        let (up0, up1) = (b - x, b - xn);
                        if lo0 * lo1 < near && rng.random::<f64>() < (-2.0 * lo0 * lo1 / dt).exp() {
                            hit = Some(0);
                        } else if up0 * up1 < near && rng.random::<f64>() < (-2.0 * up0 * up1 / dt).exp() {
                            hit = Some(1);
                        }
                    }
                    if let Some(a) = hit {
                        let t = (step as f64 - 0.5) * dt;
                        let bin = ((t / opts.bin_width) as usize).min(n_bins - 1);
                        counts[a][bin] += 1;
                        exits[a] += 1;
                        break;
                    }
                    x = xn;
                }
                if hit.is_none() {
                    censored += 1;
                }
            }
            (counts, exits, censored)
        })
        .collect();
    let mut counts = [vec![0u64; n_bins], vec![0u64; n_bins]];
    let mut exits = [0u64; 2];
    let mut censored = 0;
    for (c, e, cens) in shards {
        for a in 0..2 {
            for (dst, src) in counts[a].iter_mut().zip(&c[a]) {
                *dst += src;
            }
            exits[a] += e[a];
        }
        censored += cens;
    }
    Ok(McHistogram {
        n_paths: opts.n_paths,
        bin_width: opts.bin_width,
        t_max,
        counts,
        exits,
        censored,
    })
}

/// Intervention applied to the decision process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    /// Decision time forced to `t` hours for everyone.
    FixT { t: f64 },
    /// Realized time replaced by the policy's shifted time.
    Shift { policy: ShiftPolicy },
}

/// Ground-truth mean decision and outcome under an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionTruth {
    pub theta: f64,
    pub theta_se: f64,
    pub gamma: f64,
    pub gamma_se: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = crate::math::pairwise_sum(v) / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Resimulate `n_reps` units from the model under each intervention, sharing
/// the draws across interventions. For each unit the decision and outcome
/// probabilities under the intervention are averaged (conditional
/// expectations given the simulated unit), which has the same mean as
/// averaging Bernoulli draws with smaller variance.
pub fn interventional_mc(cfg: &SimConfig, interventions: &[Intervention], n_reps: usize) -> Result<Vec<InterventionTruth>> {
    cfg.validate()?;
    if n_reps < 2 {
        return Err(Error::Config("n_reps must be at least 2".into()));
    }
    let p = &cfg.true_params;
    let need_t = interventions.iter().any(|i| matches!(i, Intervention::Shift { .. }));
    let m = interventions.len();
    let n_chunks = n_reps.div_ceil(CHUNK);
    let per_unit: Vec<Vec<[f64; 2]>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            // a different stream family than dataset generation
            let mut rng = chunk_rng(cfg.seed ^ 0x5eed_1e55_0000_0001, c as u64);
            let rows = CHUNK.min(n_reps - c * CHUNK);
            let mut out = Vec::with_capacity(rows);
            for _ in 0..rows {
                let u = draw_unit(&cfg.schema, p, &mut rng);
                let spec = row_spec(p, &u.x, &u.z, u.h);
                let t_obs = if need_t { fpt::sample_fpt(&spec, &mut rng)?.1 } else { f64::NAN };
                let mut vals = Vec::with_capacity(m);
                for iv in interventions {
                    let t = match iv {
                        Intervention::FixT { t } => *t,
                        Intervention::Shift { policy } => policy.apply(t_obs),
                    };
                    let pa = fpt::conditional_admit_prob(&spec, t)?;
                    let gy = p.cell_prob(u.h, 1) * pa + p.cell_prob(u.h, 0) * (1.0 - pa);
                    vals.push([pa, gy]);
                }
                out.push(vals);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok((0..m)
        .map(|j| {
            let th: Vec<f64> = per_unit.iter().map(|v| v[j][0]).collect();
            let ga: Vec<f64> = per_unit.iter().map(|v| v[j][1]).collect();
            let (theta, theta_se) = mean_se(&th);
            let (gamma, gamma_se) = mean_se(&ga);
            InterventionTruth {
                theta,
                theta_se,
                gamma,
                gamma_se,
            }
        })
        .collect())
}

/// `P(A = 1)` for one row averaged over `H` given its `(x, z)`.
pub fn expected_admit_given_pretreatment(p: &LatentModelParams, ds: &Dataset, i: usize) -> Result<f64> {
    let row = ds.row(i);
    let links = links_for_row(p, &row)?;
    let pre = p.pretreatment_terms(row.x, row.z);
    let w1 = crate::latentmodel::posterior_from_terms(pre);
    let e0 = fpt::exit_probability(&links.spec(0))?;
    let e1 = fpt::exit_probability(&links.spec(1))?;
    Ok((1.0 - w1) * e0 + w1 * e1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulation_is_deterministic() {
        let cfg = reference_scenario(600, 11);
        let (a, ta) = simulate_dataset(&cfg).unwrap();
        let (b, tb) = simulate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn latent_class_and_decision_are_positively_related() {
        let (ds, truth) = simulate_dataset(&reference_scenario(3000, 5)).unwrap();
        let n = ds.n() as f64;
        let ma = ds.a().iter().map(|&v| v as f64).sum::<f64>() / n;
        let mh = truth.h.iter().map(|&v| v as f64).sum::<f64>() / n;
        let cov = ds.a().iter().zip(&truth.h).map(|(&a, &h)| (a as f64 - ma) * (h as f64 - mh)).sum::<f64>() / n;
        assert!(cov > 0.0);
    }

    #[test]
    fn symmetric_paths_split_evenly() {
        let spec = FptSpec::new(1.0, 0.5, 0.0).unwrap();
        let h = mc_first_passage(
            &spec,
            &McOptions {
                n_paths: 20_000,
                dt: 1e-3,
                bridge_correction: true,
                bin_width: 0.05,
                t_max: None,
                seed: 3,
            },
        )
        .unwrap();
        let (p, se) = h.exit_fraction(Boundary::Upper);
        assert!((p - 0.5).abs() < 3.0 * se);
        assert_eq!(h.exits[0] + h.exits[1] + h.censored, 20_000);
        assert!((h.censored as f64) / 20_000.0 < 1e-6);
    }

    #[test]
    fn fix_t_symmetric_truth_is_near_one_half() {
        let mut p = LatentModelParams::for_schema(&reference_schema());
        p.delta = [0.0, 0.0];
        let cfg = SimConfig {
            n: 10,
            schema: reference_schema(),
            true_params: p,
            seed: 1,
            mc: McConfig::default(),
        };
        let r = interventional_mc(&cfg, &[Intervention::FixT { t: 0.7 }], 4000).unwrap();
        assert!((r[0].theta - 0.5).abs() < 3.0 * r[0].theta_se);
    }
}
