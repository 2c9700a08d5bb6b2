//! Acceptance checks. Runs every criterion and prints one line each:
//!
//!     cargo test --test acceptance            # all ten
//!     cargo test --test acceptance -- 1 5     # a subset
//!
//! Exits non-zero if any selected criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use latent_threshold::comparators::{gps_curves, gps_fit, no_latent_variant, NoLatentModel};
use latent_threshold::data::Dataset;
use latent_threshold::effects::{curve_point_values, curves, shift_point_values, ShiftPolicy, WeightMode};
use latent_threshold::emfit::{fit, FitControls, FitInit, FitResult};
use latent_threshold::fpt::{conditional_admit_prob, fpt_cdf, fpt_density, sample_fpt, Boundary, FptSpec};
use latent_threshold::latentmodel::{links_for_row, observed_loglik, LatentModelParams};
use latent_threshold::sensitivity::{default_psi_grid, sensitivity_table, tilted_fit, PsiConfig};
use latent_threshold::simlab::{
    interventional_mc, mc_first_passage, reference_scenario, simulate_dataset, Intervention, McOptions, SimConfig,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

const GRID: [f64; 6] = [0.5, 1.0, 2.0, 3.0, 5.0, 10.0];
const DELTAS: [f64; 5] = [-30.0, -15.0, 0.0, 15.0, 30.0];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Check); 10] = [
        (1, "fpt_correctness", c1_fpt),
        (2, "sampler_validity", c2_sampler),
        (3, "em_monotonicity", c3_monotone),
        (4, "recovery_and_coverage", c4_coverage),
        (5, "estimand_correctness", c5_estimands),
        (6, "error_curve_shape", c6_error_curves),
        (7, "sensitivity_neutrality", c7_sensitivity),
        (8, "comparator_bias", c8_comparators),
        (9, "oakes_validation", c9_oakes),
        (10, "determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:2} {name}: PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:2} {name}: FAIL [{secs:.1}s] {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn is_monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] - w[0] >= -1e-8)
}

// ---------------------------------------------------------------------------
// 1

/// Composite Simpson on doubling segments from near zero out to `horizon`.
fn integrate_from_zero<F: Fn(f64) -> f64>(f: F, scale: f64, horizon: f64) -> f64 {
    let simpson = |a: f64, b: f64, m: usize| {
        let h = (b - a) / m as f64;
        let mut s = f(a) + f(b);
        for i in 1..m {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let mut lo = scale * 1e-8;
    let mut total = simpson(0.0, lo, 2);
    while lo < horizon {
        let hi = (2.0 * lo).min(horizon);
        total += simpson(lo, hi, 200);
        lo = hi;
    }
    total
}

/// Ruin probability of Brownian motion with drift `mu` started at `z` in `(0, b)`.
fn upper_exit_closed_form(b: f64, c: f64, d: f64) -> f64 {
    let (mu, z) = (d * b, c * b);
    if mu == 0.0 {
        c
    } else {
        (1.0 - (-2.0 * mu * z).exp()) / (1.0 - (-2.0 * mu * b).exp())
    }
}

fn density_or_zero(spec: &FptSpec, a: Boundary, t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        fpt_density(spec, a, t).unwrap()
    }
}

fn c1_fpt() -> Check {
    let t0 = Instant::now();
    let (mut worst_norm, mut worst_exit) = (0.0f64, 0.0f64);
    for b in [0.5, 1.0, 2.0] {
        for c in [0.1, 0.5, 0.9] {
            for d in [-2.0, -0.5, 0.0, 0.5, 2.0] {
                let spec = FptSpec::new(b, c, d).unwrap();
                let mu = d * b;
                let lambda1 = 0.5 * mu * mu + 0.5 * std::f64::consts::PI.powi(2) / (b * b);
                let horizon = (60.0 + mu.abs() * b) / lambda1;
                let lo = integrate_from_zero(|t| density_or_zero(&spec, Boundary::Lower, t), b * b, horizon);
                let up = integrate_from_zero(|t| density_or_zero(&spec, Boundary::Upper, t), b * b, horizon);
                worst_norm = worst_norm.max((lo + up - 1.0).abs());
                worst_exit = worst_exit.max((up - upper_exit_closed_form(b, c, d)).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xf97);
    let bin_width = 0.01;
    let mut worst_z = 0.0f64;
    for k in 0..20 {
        let b = rng.random_range(0.5..0.9);
        let c = rng.random_range(0.3..0.7);
        let d = rng.random_range(-2.0..2.0);
        let t = rng.random_range(0.08..0.25) * b * b;
        let a = if rng.random::<bool>() { Boundary::Upper } else { Boundary::Lower };
        let spec = FptSpec::new(b, c, d).unwrap();
        let bin = (t / bin_width) as usize;
        let opts = McOptions {
            n_paths: 1_000_000,
            dt: 1e-4,
            bridge_correction: true,
            bin_width,
            t_max: Some((bin + 1) as f64 * bin_width),
            seed: 500 + k,
        };
        let hist = mc_first_passage(&spec, &opts).unwrap();
        let (est, se) = hist.density(a, bin);
        let (lo, hi) = hist.bin_bounds(bin);
        // the histogram estimates the bin average, not the point value
        let h = (hi - lo) / 400.0;
        let mut s = density_or_zero(&spec, a, lo) + density_or_zero(&spec, a, hi);
        for i in 1..400 {
            s += density_or_zero(&spec, a, lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let exact = s * h / 3.0 / (hi - lo);
        worst_z = worst_z.max(((est - exact) / se).abs());
    }
    let elapsed = t0.elapsed();
    verdict(
        worst_norm < 1e-6 && worst_exit < 1e-6 && worst_z < 3.0 && elapsed <= Duration::from_secs(300),
        format!(
            "45 specs: max |mass-1| {worst_norm:.1e}, max |P(A=1) err| {worst_exit:.1e}; 20 MC points: max |z| {worst_z:.2}; {:.0}s (limit 300s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2

fn c2_sampler() -> Check {
    let specs = [
        (1.0, 0.5, 0.0),
        (0.5, 0.3, 1.0),
        (2.0, 0.7, -0.5),
        (1.5, 0.2, 2.0),
        (0.8, 0.9, -2.0),
    ];
    let n = 10_000;
    let critical = 1.628 / (n as f64).sqrt();
    let mut worst = 0.0f64;
    for (k, &(b, c, d)) in specs.iter().enumerate() {
        let spec = FptSpec::new(b, c, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77 + k as u64);
        // signed time: negative for lower exits, so one KS test covers the joint law
        let mut s: Vec<f64> = (0..n)
            .map(|_| {
                let (a, t) = sample_fpt(&spec, &mut rng).unwrap();
                if a == Boundary::Upper {
                    t
                } else {
                    -t
                }
            })
            .collect();
        s.sort_by(f64::total_cmp);
        let p0 = fpt_cdf(&spec, Boundary::Lower, f64::INFINITY).unwrap();
        let cdf = |v: f64| {
            if v < 0.0 {
                p0 - fpt_cdf(&spec, Boundary::Lower, -v).unwrap()
            } else {
                p0 + fpt_cdf(&spec, Boundary::Upper, v).unwrap()
            }
        };
        let mut dmax = 0.0f64;
        for (i, &v) in s.iter().enumerate() {
            let f = cdf(v);
            dmax = dmax.max(f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f);
        }
        worst = worst.max(dmax);
    }
    verdict(
        worst < critical,
        format!("5 specs x 10^4 draws: max KS D {worst:.4} (1% critical {critical:.4})"),
    )
}

// ---------------------------------------------------------------------------
// 3

fn c3_monotone() -> Check {
    let controls = FitControls {
        n_starts: 2,
        ..FitControls::default()
    };
    let mut worst = f64::INFINITY;
    let mut iters = Vec::new();
    for seed in 0..10u64 {
        let (ds, _) = simulate_dataset(&reference_scenario(5000, 300 + seed)).unwrap();
        let f = fit(&ds, FitInit::Random, &FitControls { seed, ..controls }).unwrap();
        for w in f.loglik_trace.windows(2) {
            worst = worst.min(w[1] - w[0]);
        }
        iters.push(f.iterations);
    }
    verdict(
        worst >= -1e-8,
        format!("10 fits at n=5000: smallest loglik increment {worst:.2e}; iterations {iters:?}"),
    )
}

// ---------------------------------------------------------------------------
// 4

fn c4_coverage() -> Check {
    let controls = FitControls {
        n_starts: 2,
        ..FitControls::default()
    };
    let (mut covered, mut total) = (0usize, 0usize);
    let mut slowest = Duration::ZERO;
    for r in 0..20u64 {
        let cfg = reference_scenario(20_000, 1000 + r);
        let truth = cfg.true_params.to_vec();
        let (ds, _) = simulate_dataset(&cfg).unwrap();
        let t0 = Instant::now();
        let f = fit(&ds, FitInit::Random, &controls).unwrap();
        slowest = slowest.max(t0.elapsed());
        for (j, (est, se)) in f.theta().iter().zip(&f.se).enumerate() {
            total += 1;
            if (est - truth[j]).abs() <= 1.959963984540054 * se {
                covered += 1;
            }
        }
    }
    let rate = covered as f64 / total as f64;
    verdict(
        (0.88..=1.0).contains(&rate) && slowest <= Duration::from_secs(600),
        format!(
            "20 replicates at n=20000: pooled 95% coverage {covered}/{total} = {:.1}% (band 88-100%); slowest fit {:.0}s (limit 600s)",
            100.0 * rate,
            slowest.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5

/// Plug-in values at the true parameters, averaged over equal batches so the
/// sampling error of the covariate average can be estimated.
fn batched<F: Fn(&Dataset) -> Vec<f64>>(ds: &Dataset, batches: usize, f: F) -> (Vec<f64>, Vec<f64>) {
    let size = ds.n() / batches;
    let per: Vec<Vec<f64>> = (0..batches)
        .map(|b| f(&ds.subset(&(b * size..(b + 1) * size).collect::<Vec<_>>()).unwrap()))
        .collect();
    (0..per[0].len())
        .map(|j| mean_se(&per.iter().map(|v| v[j]).collect::<Vec<_>>()))
        .unzip()
}

fn c5_estimands() -> Check {
    let cfg = reference_scenario(20_000, 501);
    let p = cfg.true_params.clone();
    let (ds, _) = simulate_dataset(&cfg).unwrap();
    let m = GRID.len();

    let (fixed, fixed_se) = batched(&ds, 50, |b| curve_point_values(&p, b, &GRID, None).unwrap()[..2 * m].to_vec());
    let policies: Vec<ShiftPolicy> = DELTAS.iter().map(|&d| ShiftPolicy::with_delta(d).unwrap()).collect();
    let (shift, shift_se) = batched(&ds, 50, |b| {
        shift_point_values(&p, b, &policies, WeightMode::FullPosterior, None)
            .unwrap()
            .into_iter()
            .flatten()
            .collect()
    });

    let mut ivs: Vec<Intervention> = GRID.iter().map(|&t| Intervention::FixT { t }).collect();
    ivs.extend(policies.iter().map(|&policy| Intervention::Shift { policy }));
    let truth = interventional_mc(&cfg, &ivs, 400_000).unwrap();

    let mut worst = 0.0f64;
    let z = |est: f64, se: f64, mc: f64, mc_se: f64| (est - mc).abs() / (se * se + mc_se * mc_se).sqrt();
    for j in 0..m {
        worst = worst.max(z(fixed[j], fixed_se[j], truth[j].theta, truth[j].theta_se));
        worst = worst.max(z(fixed[m + j], fixed_se[m + j], truth[j].gamma, truth[j].gamma_se));
    }
    let mut worst_shift = 0.0f64;
    for k in 0..policies.len() {
        let tr = truth[m + k];
        worst_shift = worst_shift.max(z(shift[2 * k], shift_se[2 * k], tr.theta, tr.theta_se));
        worst_shift = worst_shift.max(z(shift[2 * k + 1], shift_se[2 * k + 1], tr.gamma, tr.gamma_se));
    }
    verdict(
        worst < 3.0 && worst_shift < 3.0,
        format!(
            "theta/gamma at {GRID:?} h: max |z| {worst:.2}; shifts {DELTAS:?} min: max |z| {worst_shift:.2}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

/// Reference scenario with the start point well below the midpoint, so the
/// latent class confounds both the time and the decision.
fn early_discharge_scenario(n: usize, seed: u64) -> SimConfig {
    let mut cfg = reference_scenario(n, seed);
    cfg.true_params.beta_c = vec![-1.5, 0.1, 0.0, -0.1, 0.1, 0.1];
    cfg
}

/// Per-class averages of the error probabilities over a simulated population
/// with known labels.
fn error_truth(p: &LatentModelParams, ds: &Dataset, h: &[u8], grid: &[f64]) -> Vec<[(f64, f64); 2]> {
    grid.iter()
        .map(|&t| {
            let mut vals: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for i in 0..ds.n() {
                let links = links_for_row(p, &ds.row(i)).unwrap();
                let pa = conditional_admit_prob(&links.spec(h[i]), t).unwrap();
                if h[i] == 1 {
                    vals[1].push(1.0 - pa);
                } else {
                    vals[0].push(pa);
                }
            }
            [mean_se(&vals[0]), mean_se(&vals[1])]
        })
        .collect()
}

fn c6_error_curves() -> Check {
    let cfg = early_discharge_scenario(5000, 61);
    let (ds, _) = simulate_dataset(&cfg).unwrap();
    let f = fit(&ds, FitInit::Random, &FitControls { n_starts: 2, ..FitControls::default() }).unwrap();
    let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 10.0).collect();
    let set = curves(&f, &ds, &grid, 0.95).unwrap();
    let err0_up = set.err0.estimate.windows(2).all(|w| w[1] >= w[0]);
    let err1_down = set.err1.estimate.windows(2).all(|w| w[1] <= w[0]);

    let (pop, truth_h) = simulate_dataset(&early_discharge_scenario(40_000, 62)).unwrap();
    let truth = error_truth(&cfg.true_params, &pop, &truth_h.h, &GRID);
    let mc_shape = truth.windows(2).all(|w| w[1][0].0 >= w[0][0].0 && w[1][1].0 <= w[0][1].0);

    // the estimator's functional at the true parameters against the MC
    let m = GRID.len();
    let (at_truth, at_truth_se) = batched(&ds, 50, |b| {
        curve_point_values(&cfg.true_params, b, &GRID, None).unwrap()[2 * m..4 * m].to_vec()
    });
    let mut worst_truth = 0.0f64;
    // fitted curve against the MC; reported, not gated, since it mixes in the
    // sampling error of a single fit
    let mut worst_fit = 0.0f64;
    for (j, &t) in GRID.iter().enumerate() {
        let g = grid.iter().position(|&v| (v - t).abs() < 1e-9).unwrap();
        for (k, curve) in [&set.err0, &set.err1].into_iter().enumerate() {
            let (mc, mc_se) = truth[j][k];
            let se = (at_truth_se[k * m + j].powi(2) + mc_se * mc_se).sqrt();
            worst_truth = worst_truth.max((at_truth[k * m + j] - mc).abs() / se);
            let se = (curve.se[g].powi(2) + mc_se * mc_se).sqrt();
            worst_fit = worst_fit.max((curve.estimate[g] - mc).abs() / se);
        }
    }
    verdict(
        err0_up && err1_down && mc_shape && worst_truth < 3.0,
        format!(
            "fitted err0 non-decreasing: {err0_up}, err1 non-increasing: {err1_down} over 100 grid points; \
             MC shape agrees: {mc_shape}; at true parameters max |z| vs MC {worst_truth:.2}; \
             fitted curve max |z| vs MC {worst_fit:.2}; err1 {:.3} -> {:.3}, err0 {:.3} -> {:.3}",
            set.err1.estimate[0],
            set.err1.estimate[99],
            set.err0.estimate[0],
            set.err0.estimate[99]
        ),
    )
}

// ---------------------------------------------------------------------------
// 7

fn c7_sensitivity() -> Check {
    let (ds, _) = simulate_dataset(&reference_scenario(2000, 71)).unwrap();
    let controls = FitControls {
        n_starts: 1,
        seed: 9,
        ..FitControls::default()
    };
    let base = fit(&ds, FitInit::Random, &controls).unwrap();
    let neutral = tilted_fit(&ds, PsiConfig::NEUTRAL, FitInit::Random, &controls).unwrap();
    let identical = base.theta() == neutral.theta()
        && base.loglik_trace == neutral.loglik_trace
        && base.info == neutral.info
        && base.se == neutral.se;

    let grid = default_psi_grid();
    let times = [0.5, 1.0, 2.0, 3.0];
    let (table, fits) =
        sensitivity_table(&ds, &grid, &times, &FitInit::Params(base.params.clone()), &controls, 0.95).unwrap();
    let completed = fits.iter().filter(|f| f.is_some()).count();
    let monotone = fits.iter().flatten().filter(|f| is_monotone(&f.loglik_trace)).count();
    verdict(
        identical && completed == 25 && monotone == 25 && table.rows.len() == 100,
        format!(
            "neutral tilt bit-identical: {identical}; 5x5 grid: {completed}/25 fitted, {monotone}/25 EM-monotone, {} rows",
            table.rows.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

/// Slower, more strongly confounded variant: the latent class separates the
/// drifts further and the observations are weaker proxies for it.
fn strong_confounding_scenario(n: usize, seed: u64) -> SimConfig {
    let mut cfg = reference_scenario(n, seed);
    cfg.true_params.delta = [-1.2, 1.5];
    cfg.true_params.beta_b[0] = 0.9;
    cfg.true_params.z_models[0].coef[4] = 1.0;
    cfg.true_params.z_models[1].coef[4] = 1.0;
    cfg
}

fn c8_comparators() -> Check {
    let cfg = strong_confounding_scenario(5000, 41);
    let ivs: Vec<Intervention> = GRID.iter().map(|&t| Intervention::FixT { t }).collect();
    let truth = interventional_mc(&cfg, &ivs, 200_000).unwrap();
    let (ds, _) = simulate_dataset(&cfg).unwrap();
    let controls = FitControls {
        n_starts: 2,
        ..FitControls::default()
    };
    let full = curves(&fit(&ds, FitInit::Random, &controls).unwrap(), &ds, &GRID, 0.95).unwrap().theta;
    let no_latent = no_latent_variant(NoLatentModel::Brownian, &ds, None, &GRID, &controls, 0.95).unwrap().theta;
    let (gps, _) = gps_curves(&gps_fit(&ds).unwrap(), &ds, &GRID, 0.95).unwrap();
    let max_z = |c: &latent_threshold::effects::CurveResult| {
        (0..GRID.len())
            .map(|j| (c.estimate[j] - truth[j].theta).abs() / (c.se[j].powi(2) + truth[j].theta_se.powi(2)).sqrt())
            .fold(0.0f64, f64::max)
    };
    let (zf, zn, zg) = (max_z(&full), max_z(&no_latent), max_z(&gps));
    verdict(
        zf < 3.0 && zn > 3.0 && zg > 3.0,
        format!("max |z| vs true theta over {GRID:?} h: latent {zf:.2}, no-latent brownian {zn:.1}, gps {zg:.1}"),
    )
}

// ---------------------------------------------------------------------------
// 9

fn direct_hessian(f: &FitResult, ds: &Dataset) -> DMatrix<f64> {
    let theta = f.theta();
    let q = theta.len();
    let ll = |v: &[f64]| observed_loglik(&f.params.with_values(v).unwrap(), ds).unwrap();
    let steps: Vec<f64> = theta.iter().map(|v| 1e-3 * v.abs().max(1.0)).collect();
    let f0 = ll(&theta);
    let mut h = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..=i {
            let at = |si: f64, sj: f64| {
                let mut v = theta.clone();
                v[i] += si * steps[i];
                v[j] += sj * steps[j];
                ll(&v)
            };
            let d = if i == j {
                (at(1.0, 0.0) - 2.0 * f0 + at(-1.0, 0.0)) / (steps[i] * steps[i])
            } else {
                (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * steps[i] * steps[j])
            };
            h[(i, j)] = d;
            h[(j, i)] = d;
        }
    }
    h
}

fn c9_oakes() -> Check {
    let (ds, _) = simulate_dataset(&reference_scenario(2000, 91)).unwrap();
    let f = fit(&ds, FitInit::Random, &FitControls { n_starts: 1, ..FitControls::default() }).unwrap();
    let direct = -direct_hessian(&f, &ds);
    let rel = (&f.info - &direct).norm() / direct.norm();
    verdict(
        rel < 1e-3,
        format!("n=2000, {} parameters: relative Frobenius difference {rel:.2e} (limit 1e-3)", f.info.nrows()),
    )
}

// ---------------------------------------------------------------------------
// 10

fn ltr(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ltr")).args(args).output().unwrap();
    assert!(out.status.success(), "ltr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn same_bytes(a: &Path, b: &Path, name: &str) -> bool {
    std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap()
}

fn c10_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    std::fs::write(d.join("sim.json"), r#"{"n": 2000, "seed": 5}"#).unwrap();
    ltr(&["simulate", "--config", &s(&d.join("sim.json")), "--out", &s(&d.join("sim"))]);
    std::fs::write(
        d.join("fit.json"),
        r#"{"input": {"data": "sim/data.csv", "schema": "sim/schema.json"}, "controls": {"n_starts": 2, "seed": 3}}"#,
    )
    .unwrap();
    std::fs::write(
        d.join("curves.json"),
        r#"{"input": {"data": "sim/data.csv", "schema": "sim/schema.json"}, "fit": "run1/fit.json"}"#,
    )
    .unwrap();
    let cfg = |n: &str| s(&d.join(n));
    for (run, threads) in [("run1", "2"), ("run2", "2"), ("run3", "1")] {
        ltr(&["fit", "--config", &cfg("fit.json"), "--out", &cfg(run), "--threads", threads]);
    }
    for (run, threads) in [("curves1", "2"), ("curves2", "2"), ("curves3", "1")] {
        ltr(&["curves", "--config", &cfg("curves.json"), "--out", &cfg(run), "--threads", threads]);
    }
    let fit_same = same_bytes(&d.join("run1"), &d.join("run2"), "fit.json");
    let fit_threads = same_bytes(&d.join("run1"), &d.join("run3"), "fit.json");
    let names = ["theta.csv", "gamma.csv", "err0.csv", "err1.csv", "err_total.csv"];
    let curves_same = names.iter().all(|n| same_bytes(&d.join("curves1"), &d.join("curves2"), n));
    let curves_threads = names.iter().all(|n| same_bytes(&d.join("curves1"), &d.join("curves3"), n));
    verdict(
        fit_same && fit_threads && curves_same && curves_threads,
        format!(
            "fit.json identical across runs at 2 threads: {fit_same}, vs 1 thread: {fit_threads}; \
             5 curve CSVs identical at 2 threads: {curves_same}, vs 1 thread: {curves_threads}"
        ),
    )
}
