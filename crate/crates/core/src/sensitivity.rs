//! Refits under a tilted outcome-decision dependence, to probe the
//! conditional-independence assumption.
//!
//! The tilted complete-data density of `(A, T, Y)` given `(h, x, z)` is
//! proportional to `ψ_a^y · g(a, t) · P(y | h, a)` and is normalized
//! jointly over `(a, t, y)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::effects::curves;
use crate::emfit::{fit_tilted, FitControls, FitInit, FitResult};
use crate::error::{Error, Result};
use crate::latentmodel::Tilt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiConfig {
    pub psi0: f64,
    pub psi1: f64,
}

impl PsiConfig {
    pub const NEUTRAL: PsiConfig = PsiConfig { psi0: 1.0, psi1: 1.0 };

    pub fn new(psi0: f64, psi1: f64) -> Result<Self> {
        let p = PsiConfig { psi0, psi1 };
        p.tilt()?;
        Ok(p)
    }

    pub fn tilt(&self) -> Result<Tilt> {
        Tilt::new(self.psi0, self.psi1)
    }
}

/// `{0.95, 0.975, 1, 1.025, 1.05}²`, `psi0` varying slowest.
pub fn default_psi_grid() -> Vec<PsiConfig> {
    const LEVELS: [f64; 5] = [0.95, 0.975, 1.0, 1.025, 1.05];
    LEVELS
        .iter()
        .flat_map(|&a| LEVELS.iter().map(move |&b| PsiConfig { psi0: a, psi1: b }))
        .collect()
}

/// Full latent-model fit under the tilt `psi`. A neutral tilt takes exactly
/// the untilted code path.
pub fn tilted_fit(ds: &Dataset, psi: PsiConfig, init: FitInit, controls: &FitControls) -> Result<FitResult> {
    fit_tilted(ds, init, controls, Some(psi.tilt()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub psi0: f64,
    pub psi1: f64,
    pub t_hours: f64,
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub converged: bool,
    /// Failure message when the cell could not be fitted; values are NaN.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityTable {
    /// Long CSV: `psi0, psi1, t_hours, estimate, se, lo, hi, converged`.
    /// Failed cells leave the numeric fields empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["psi0", "psi1", "t_hours", "estimate", "se", "lo", "hi", "converged"])?;
        let num = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
        for r in &self.rows {
            wr.write_record([
                r.psi0.to_string(),
                r.psi1.to_string(),
                r.t_hours.to_string(),
                num(r.estimate),
                num(r.se),
                num(r.lo),
                num(r.hi),
                r.converged.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// One tilted fit per grid cell and `γ̂(t)` at each requested time. Cells
/// that fail are kept as flagged gaps.
pub fn sensitivity_table(
    ds: &Dataset,
    grid: &[PsiConfig],
    times: &[f64],
    init: &FitInit,
    controls: &FitControls,
    level: f64,
) -> Result<(SensitivityTable, Vec<Option<FitResult>>)> {
    if grid.is_empty() {
        return Err(Error::Config("sensitivity grid is empty".into()));
    }
    crate::effects::check_grid(times)?;
    for p in grid {
        p.tilt()?;
    }
    let cells: Vec<(Vec<SensitivityRow>, Option<FitResult>)> = grid
        .par_iter()
        .map(|psi| {
            let outcome = tilted_fit(ds, *psi, init.clone(), controls)
                .and_then(|f| curves(&f, ds, times, level).map(|c| (f, c)));
            match outcome {
                Ok((f, c)) => {
                    let g = c.gamma;
                    let rows = (0..times.len())
                        .map(|j| SensitivityRow {
                            psi0: psi.psi0,
                            psi1: psi.psi1,
                            t_hours: times[j],
                            estimate: g.estimate[j],
                            se: g.se[j],
                            lo: g.ci_low[j],
                            hi: g.ci_high[j],
                            converged: f.converged,
                            error: None,
                        })
                        .collect();
                    (rows, Some(f))
                }
                Err(e) => {
                    log::warn!("sensitivity cell ({}, {}) failed: {e}", psi.psi0, psi.psi1);
                    let rows = times
                        .iter()
                        .map(|&t| SensitivityRow {
                            psi0: psi.psi0,
                            psi1: psi.psi1,
                            t_hours: t,
                            estimate: f64::NAN,
                            se: f64::NAN,
                            lo: f64::NAN,
                            hi: f64::NAN,
                            converged: false,
                            error: Some(e.to_string()),
                        })
                        .collect();
                    (rows, None)
                }
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(grid.len() * times.len());
    let mut fits = Vec::with_capacity(grid.len());
    for (r, f) in cells {
        rows.extend(r);
        fits.push(f);
    }
    Ok((SensitivityTable { rows }, fits))
}
