//! Command-line front end: `simulate | fit | curves | shift | sensitivity | compare`.
//!
//! Each subcommand reads one JSON config (unknown keys rejected) and writes
//! its outputs to `--out`. Every output carries the tool version and the
//! sha256 of the echoed config: JSON outputs as fields, CSV outputs as a
//! leading `#` line. Exit codes: 0 success, 2 config or validation error,
//! 3 fitting error, 4 I/O error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comparators::{gps_curves, gps_fit, lognormal_curves, lognormal_fit, no_latent_variant, NoLatentModel};
use crate::data::{filter_rows, load_csv, ColumnSchema, Dataset, LoadOptions, RowPredicate};
use crate::effects::{curves, default_grid, shift_estimates, CurveResult, ShiftPolicy, ShiftReport, WeightMode};
use crate::emfit::{fit, FitControls, FitDoc, FitInit, FitResult};
use crate::error::Error;
use crate::latentmodel::{LatentModelParams, ParamDoc};
use crate::sensitivity::{default_psi_grid, sensitivity_table, PsiConfig};
use crate::simlab::{reference_params, reference_schema, simulate_dataset, McConfig, SimConfig};

pub const TOOL: &str = "ltr";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "ltr", version, about = "Latent threshold regression for time-to-decision response curves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and its hidden class labels.
    Simulate(Common),
    /// Fit the latent-class threshold model by EM.
    Fit(Common),
    /// Fixed-time response and error curves.
    Curves(Common),
    /// Estimates under shifted decision times.
    Shift(Common),
    /// Refit over a grid of outcome-decision tilts.
    Sensitivity(Common),
    /// Curves from several estimators on the same data.
    Compare(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config; `simulate` falls back to the reference scenario.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caps the worker pool.
    #[arg(long)]
    pub threads: Option<usize>,
}

// ---------------------------------------------------------------------------
// Configs

/// Data file, schema file and preprocessing shared by the fitting commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub data: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub load: LoadOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<RowPredicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the reference schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<ColumnSchema>,
    /// Defaults to the reference parameters; required with a custom schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamDoc>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n: 5000,
            seed: 0,
            schema: None,
            params: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub controls: FitControls,
    /// Earlier `fit.json` to start a single EM run from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesConfig {
    pub input: InputConfig,
    /// Existing `fit.json`; the data are fitted when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    #[serde(default)]
    pub controls: FitControls,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_level")]
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub input: InputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    #[serde(default)]
    pub controls: FitControls,
    /// Shifts in minutes.
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Minimum shifted time in minutes.
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default = "default_level")]
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub input: InputConfig,
    /// Base `fit.json` whose parameters start every tilted fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub controls: FitControls,
    #[serde(default = "default_psi_grid")]
    pub psi_grid: Vec<PsiConfig>,
    /// Hours at which `γ̂` is reported.
    #[serde(default = "default_times")]
    pub times: Vec<f64>,
    #[serde(default = "default_level")]
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Latent,
    NoLatentBrownian,
    NoLatentLognormal,
    Gps,
    Lognormal,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Latent => "latent",
            EstimatorKind::NoLatentBrownian => "no_latent_brownian",
            EstimatorKind::NoLatentLognormal => "no_latent_lognormal",
            EstimatorKind::Gps => "gps",
            EstimatorKind::Lognormal => "lognormal",
        }
    }
}

fn all_estimators() -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::Latent,
        EstimatorKind::NoLatentBrownian,
        EstimatorKind::NoLatentLognormal,
        EstimatorKind::Gps,
        EstimatorKind::Lognormal,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub input: InputConfig,
    /// Existing `fit.json` for the latent estimator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    #[serde(default)]
    pub controls: FitControls,
    /// The first entry is the reference for the pointwise differences.
    #[serde(default = "all_estimators")]
    pub estimators: Vec<EstimatorKind>,
    /// Binary `Z` column of the Brownian no-latent variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy: Option<String>,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_level() -> f64 {
    0.95
}

fn default_deltas() -> Vec<f64> {
    vec![-30.0, -15.0, 0.0, 15.0, 30.0]
}

fn default_floor() -> f64 {
    5.0
}

fn default_times() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 3.0, 5.0, 10.0]
}

fn check_level(level: f64) -> Result<(), CliError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::config(format!("level must lie in (0, 1), got {level}")))
    }
}

// ---------------------------------------------------------------------------
// Output documents

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOutput {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub fit: FitDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftOutput {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub report: ShiftReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
    pub theta: Vec<f64>,
    pub theta_se: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_se: Vec<f64>,
    /// Pointwise differences against the reference estimator.
    pub theta_minus_reference: Vec<f64>,
    pub gamma_minus_reference: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub level: f64,
    pub grid: Vec<f64>,
    pub reference: String,
    pub estimators: IndexMap<String, EstimatorSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub threads: usize,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
    pub outputs: Vec<String>,
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn config(message: String) -> Self {
        CliError {
            code: 2,
            kind: "config",
            message,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            code: 4,
            kind: "io",
            message: format!("{}: {e}", path.display()),
        }
    }

    /// One JSON line for stderr.
    pub fn diagnostic(&self) -> String {
        serde_json::json!({
            "tool": TOOL,
            "exit": self.code,
            "kind": self.kind,
            "message": self.message.replace('\n', " "),
        })
        .to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = classify(&e);
        CliError {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Row { source, .. } => classify(source),
        Error::Io(_) => (4, "io"),
        Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => (4, "io"),
        Error::Csv(_) | Error::Json(_) => (2, "validation"),
        Error::Fitting(_) | Error::Information(..) | Error::StratumEmpty(_) | Error::Accuracy { .. } => (3, "fitting"),
        Error::Config(_) => (2, "config"),
        Error::Schema(_) | Error::Validation { .. } | Error::Shape(_) | Error::ParamDomain(_) | Error::Domain(_) => {
            (2, "validation")
        }
    }
}

// ---------------------------------------------------------------------------
// Entry point

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Fit(c) => ("fit", c),
        Command::Curves(c) => ("curves", c),
        Command::Shift(c) => ("shift", c),
        Command::Sensitivity(c) => ("sensitivity", c),
        Command::Compare(c) => ("compare", c),
    };
    let threads = match common.threads {
        Some(0) => return Err(CliError::config("--threads must be at least 1".into())),
        Some(n) => {
            // a second call in the same process keeps the existing pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            n
        }
        None => rayon::current_num_threads(),
    };
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut out = Outputs::new(&common.out)?;
    match &cli.command {
        Command::Simulate(c) => cmd_simulate(c, &mut out)?,
        Command::Fit(c) => cmd_fit(c, &mut out)?,
        Command::Curves(c) => cmd_curves(c, &mut out)?,
        Command::Shift(c) => cmd_shift(c, &mut out)?,
        Command::Sensitivity(c) => cmd_sensitivity(c, &mut out)?,
        Command::Compare(c) => cmd_compare(c, &mut out)?,
    }
    let meta = RunMeta {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: name.into(),
        config_sha256: out.hash.clone(),
        threads,
        started_unix,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        outputs: out.written.clone(),
    };
    out.write_json("meta.json", &meta)
}

// ---------------------------------------------------------------------------
// Plumbing

struct Outputs {
    dir: PathBuf,
    hash: String,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            hash: String::new(),
            written: Vec::new(),
        })
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes `config.json` and fixes the hash embedded in later outputs.
    fn echo_config<C: Serialize>(&mut self, cfg: &C) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(cfg).map_err(Error::from)?;
        text.push('\n');
        self.hash = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        self.write_bytes("config.json", text.as_bytes())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    fn csv_header(&self) -> Vec<u8> {
        format!("# {TOOL} {VERSION} config_sha256={}\n", self.hash).into_bytes()
    }

    fn write_csv<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> crate::Result<()>,
    {
        let mut buf = self.csv_header();
        body(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    fn write_curve(&mut self, name: &str, c: &CurveResult) -> Result<(), CliError> {
        self.write_csv(name, |b| c.write_csv(b))
    }
}

fn read_config<C: DeserializeOwned>(path: &Path) -> Result<C, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn required_config<C: DeserializeOwned>(c: &Common) -> Result<(C, PathBuf), CliError> {
    let path = c.config.as_ref().ok_or_else(|| CliError::config("--config is required".into()))?;
    Ok((read_config(path)?, base_dir(path)))
}

fn base_dir(config: &Path) -> PathBuf {
    let parent = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let parent = if parent.as_os_str().is_empty() { PathBuf::from(".") } else { parent };
    fs::canonicalize(&parent).unwrap_or(parent)
}

/// Relative paths in a config are taken from the config's directory; the
/// echo carries the resolved paths so it can be rerun from anywhere.
fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_input(base: &Path, input: &mut InputConfig) {
    resolve(base, &mut input.data);
    resolve(base, &mut input.schema);
}

fn load_input(input: &InputConfig) -> Result<Dataset, CliError> {
    let schema_text = fs::read_to_string(&input.schema).map_err(|e| CliError::io(&input.schema, e))?;
    let schema = ColumnSchema::from_json_str(&schema_text)?;
    if !input.data.exists() {
        return Err(CliError::io(
            &input.data,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let ds = load_csv(&input.data, &schema, &input.load)?;
    match &input.filter {
        Some(pred) => Ok(filter_rows(&ds, pred)?),
        None => Ok(ds),
    }
}

fn load_fit(path: &Path, schema: &ColumnSchema) -> Result<FitResult, CliError> {
    let doc: FitOutput = read_config(path)?;
    Ok(FitResult::from_doc(&doc.fit, schema)?)
}

fn fit_or_load(fit_path: Option<&PathBuf>, ds: &Dataset, controls: &FitControls) -> Result<FitResult, CliError> {
    match fit_path {
        Some(p) => load_fit(p, ds.schema()),
        None => Ok(fit(ds, FitInit::Random, controls)?),
    }
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_simulate(c: &Common, out: &mut Outputs) -> Result<(), CliError> {
    let mut cfg: SimulateConfig = match &c.config {
        Some(p) => read_config(p)?,
        None => SimulateConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let schema = cfg.schema.clone().unwrap_or_else(reference_schema);
    let true_params = match (&cfg.params, &cfg.schema) {
        (Some(doc), _) => LatentModelParams::from_doc(doc, &schema)?,
        (None, None) => reference_params(),
        (None, Some(_)) => return Err(CliError::config("params are required with a custom schema".into())),
    };
    let sim = SimConfig {
        n: cfg.n,
        schema,
        true_params,
        seed: cfg.seed,
        mc: McConfig::default(),
    };
    sim.validate()?;
    out.echo_config(&cfg)?;
    let (ds, truth) = simulate_dataset(&sim)?;
    out.write_csv("data.csv", |b| ds.write_csv(b))?;
    out.write_csv("truth.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["row", "h"])?;
        for (i, h) in truth.h.iter().enumerate() {
            w.write_record([i.to_string(), h.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write_json("schema.json", ds.schema())
}

fn cmd_fit(c: &Common, out: &mut Outputs) -> Result<(), CliError> {
    let (mut cfg, base): (FitConfig, _) = required_config(c)?;
    resolve_input(&base, &mut cfg.input);
    if let Some(p) = cfg.init.as_mut() {
        resolve(&base, p);
    }
    if let Some(s) = c.seed {
        cfg.controls.seed = s;
    }
    let ds = load_input(&cfg.input)?;
    let init = match &cfg.init {
        Some(p) => FitInit::Params(load_fit(p, ds.schema())?.params),
        None => FitInit::Random,
    };
    out.echo_config(&cfg)?;
    let f = fit(&ds, init, &cfg.controls)?;
    write_fit(out, &f, ds.schema())
}

fn write_fit(out: &mut Outputs, f: &FitResult, schema: &ColumnSchema) -> Result<(), CliError> {
    let doc = FitOutput {
        tool: TOOL.into(),
        version: VERSION.into(),
        config_sha256: out.hash.clone(),
        fit: f.to_doc(schema)?,
    };
    out.write_json("fit.json", &doc)?;
    out.write_csv("trace.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["iteration", "loglik"])?;
        for (i, ll) in f.loglik_trace.iter().enumerate() {
            w.write_record([i.to_string(), ll.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn cmd_curves(c: &Common, out: &mut Outputs) -> Result<(), CliError> {
    let (mut cfg, base): (CurvesConfig, _) = required_config(c)?;
    resolve_input(&base, &mut cfg.input);
    if let Some(p) = cfg.fit.as_mut() {
        resolve(&base, p);
    }
    if let Some(s) = c.seed {
        cfg.controls.seed = s;
    }
    check_level(cfg.level)?;
    crate::effects::check_grid(&cfg.grid)?;
    let ds = load_input(&cfg.input)?;
    out.echo_config(&cfg)?;
    let f = fit_or_load(cfg.fit.as_ref(), &ds, &cfg.controls)?;
    if cfg.fit.is_none() {
        write_fit(out, &f, ds.schema())?;
    }
    let set = curves(&f, &ds, &cfg.grid, cfg.level)?;
    out.write_curve("theta.csv", &set.theta)?;
    out.write_curve("gamma.csv", &set.gamma)?;
    out.write_curve("err0.csv", &set.err0)?;
    out.write_curve("err1.csv", &set.err1)?;
    out.write_curve("err_total.csv", &set.err_total)
}

fn cmd_shift(c: &Common, out: &mut Outputs) -> Result<(), CliError> {
    let (mut cfg, base): (ShiftConfig, _) = required_config(c)?;
    resolve_input(&base, &mut cfg.input);
    if let Some(p) = cfg.fit.as_mut() {
        resolve(&base, p);
    }
    if let Some(s) = c.seed {
        cfg.controls.seed = s;
    }
    check_level(cfg.level)?;
    if cfg.deltas.is_empty() {
        return Err(CliError::config("deltas is empty".into()));
    }
    let policies: Vec<ShiftPolicy> = cfg
        .deltas
        .iter()
        .map(|&d| ShiftPolicy::new(d, cfg.floor))
        .collect::<crate::Result<_>>()?;
    let ds = load_input(&cfg.input)?;
    out.echo_config(&cfg)?;
    let f = fit_or_load(cfg.fit.as_ref(), &ds, &cfg.controls)?;
    let report = shift_estimates(&f, &ds, &policies, cfg.weight_mode, cfg.level)?;
    let doc = ShiftOutput {
        tool: TOOL.into(),
        version: VERSION.into(),
        config_sha256: out.hash.clone(),
        report,
    };
    out.write_json("shift.json", &doc)
}

fn cmd_sensitivity(c: &Common, out: &mut Outputs) -> Result<(), CliError> {
    let (mut cfg, base): (SensitivityConfig, _) = required_config(c)?;
    resolve_input(&base, &mut cfg.input);
    if let Some(p) = cfg.init.as_mut() {
        resolve(&base, p);
    }
    if let Some(s) = c.seed {
        cfg.controls.seed = s;
    }
    check_level(cfg.level)?;
    crate::effects::check_grid(&cfg.times)?;
    if cfg.psi_grid.is_empty() {
        return Err(CliError::config("psi_grid is empty".into()));
    }
    for p in &cfg.psi_grid {
        p.tilt()?;
    }
    let ds = load_input(&cfg.input)?;
    let init = match &cfg.init {
        Some(p) => FitInit::Params(load_fit(p, ds.schema())?.params),
        None => FitInit::Random,
    };
    out.echo_config(&cfg)?;
    let (table, _) = sensitivity_table(&ds, &cfg.psi_grid, &cfg.times, &init, &cfg.controls, cfg.level)?;
    out.write_csv("sensitivity.csv", |b| table.write_csv(b))
}

fn cmd_compare(c: &Common, out: &mut Outputs) -> Result<(), CliError> {
    let (mut cfg, base): (CompareConfig, _) = required_config(c)?;
    resolve_input(&base, &mut cfg.input);
    if let Some(p) = cfg.fit.as_mut() {
        resolve(&base, p);
    }
    if let Some(s) = c.seed {
        cfg.controls.seed = s;
    }
    check_level(cfg.level)?;
    crate::effects::check_grid(&cfg.grid)?;
    if cfg.estimators.is_empty() {
        return Err(CliError::config("estimators is empty".into()));
    }
    for (i, e) in cfg.estimators.iter().enumerate() {
        if cfg.estimators[..i].contains(e) {
            return Err(CliError::config(format!("estimator '{}' listed twice", e.name())));
        }
    }
    let ds = load_input(&cfg.input)?;
    out.echo_config(&cfg)?;

    let mut results: Vec<(EstimatorKind, Option<f64>, CurveResult, CurveResult, Vec<String>)> = Vec::new();
    for &kind in &cfg.estimators {
        let (ll, theta, gamma, warnings) = match kind {
            EstimatorKind::Latent => {
                let f = fit_or_load(cfg.fit.as_ref(), &ds, &cfg.controls)?;
                let set = curves(&f, &ds, &cfg.grid, cfg.level)?;
                (Some(f.loglik), set.theta, set.gamma, f.warnings)
            }
            EstimatorKind::NoLatentBrownian | EstimatorKind::NoLatentLognormal => {
                let model = if kind == EstimatorKind::NoLatentBrownian {
                    NoLatentModel::Brownian
                } else {
                    NoLatentModel::Lognormal
                };
                let r = no_latent_variant(model, &ds, cfg.proxy.as_deref(), &cfg.grid, &cfg.controls, cfg.level)?;
                (Some(r.loglik), r.theta, r.gamma, r.warnings)
            }
            EstimatorKind::Gps => {
                let f = gps_fit(&ds)?;
                let (theta, gamma) = gps_curves(&f, &ds, &cfg.grid, cfg.level)?;
                (Some(f.loglik), theta, gamma, f.warnings)
            }
            EstimatorKind::Lognormal => {
                let f = lognormal_fit(&ds, None, &cfg.controls)?;
                let (theta, gamma) = lognormal_curves(&f, &ds, &cfg.grid, cfg.level)?;
                (Some(f.loglik), theta, gamma, f.warnings)
            }
        };
        out.write_curve(&format!("{}_theta.csv", kind.name()), &theta)?;
        out.write_curve(&format!("{}_gamma.csv", kind.name()), &gamma)?;
        results.push((kind, ll, theta, gamma, warnings));
    }

    let (ref_theta, ref_gamma) = (results[0].2.estimate.clone(), results[0].3.estimate.clone());
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let estimators = results
        .into_iter()
        .map(|(kind, loglik, theta, gamma, warnings)| {
            let s = EstimatorSummary {
                loglik,
                theta_minus_reference: diff(&theta.estimate, &ref_theta),
                gamma_minus_reference: diff(&gamma.estimate, &ref_gamma),
                theta: theta.estimate,
                theta_se: theta.se,
                gamma: gamma.estimate,
                gamma_se: gamma.se,
                warnings,
            };
            (kind.name().to_string(), s)
        })
        .collect();
    let summary = CompareSummary {
        tool: TOOL.into(),
        version: VERSION.into(),
        config_sha256: out.hash.clone(),
        level: cfg.level,
        grid: cfg.grid.clone(),
        reference: cfg.estimators[0].name().to_string(),
        estimators,
    };
    out.write_json("summary.json", &summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_keys_are_rejected() {
        let r: std::result::Result<FitConfig, _> =
            serde_json::from_str(r#"{"input": {"data": "d.csv", "schema": "s.json"}, "bogus": 1}"#);
        assert!(r.is_err());
        let r: std::result::Result<FitConfig, _> =
            serde_json::from_str(r#"{"input": {"data": "d.csv", "schema": "s.json"}, "controls": {"n_start": 1}}"#);
        assert!(r.is_err());
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg: ShiftConfig = serde_json::from_str(r#"{"input": {"data": "d.csv", "schema": "s.json"}}"#).unwrap();
        assert_eq!(cfg.deltas, vec![-30.0, -15.0, 0.0, 15.0, 30.0]);
        assert_eq!(cfg.floor, 5.0);
        assert_eq!(cfg.weight_mode, WeightMode::FullPosterior);
        let cmp: CompareConfig = serde_json::from_str(r#"{"input": {"data": "d.csv", "schema": "s.json"}}"#).unwrap();
        assert_eq!(cmp.estimators.len(), 5);
        assert_eq!(cmp.grid.len(), 100);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).code, 2);
        assert_eq!(CliError::from(Error::Fitting("x".into())).code, 3);
        assert_eq!(CliError::from(Error::StratumEmpty(1)).code, 3);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::from(Error::Io(io)).code, 4);
        let nested = Error::Row {
            row: 3,
            source: Box::new(Error::Fitting("x".into())),
        };
        assert_eq!(CliError::from(nested).code, 3);
    }

    #[test]
    fn diagnostic_is_one_json_line() {
        let e = CliError::config("bad\nthing".into());
        let line = e.diagnostic();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["exit"], 2);
        assert_eq!(v["kind"], "config");
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(["ltr", "fit", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 2);
        let code = run(["ltr", "fit", "--config", "/nonexistent/x.json", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 4);
    }
}
