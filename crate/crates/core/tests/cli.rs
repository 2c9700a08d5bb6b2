use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_threshold::simlab::{interventional_mc, reference_scenario, Intervention};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "ltr {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Rows of a CSV written by the tool, skipping the metadata comment.
fn rows(p: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn simulated(n: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("sim.json"), format!(r#"{{"n": {n}, "seed": {seed}}}"#)).unwrap();
        ok(&["simulate", "--config", &s(&root.join("sim.json")), "--out", &s(&root.join("sim"))]);
        Workspace { _dir: dir, root }
    }

    fn config(&self, name: &str, body: &str) -> String {
        let p = self.root.join(name);
        std::fs::write(&p, body).unwrap();
        s(&p)
    }

    fn out(&self, name: &str) -> String {
        s(&self.root.join(name))
    }
}

const INPUT: &str = r#""input": {"data": "sim/data.csv", "schema": "sim/schema.json"}"#;

#[test]
fn theta_interval_at_one_hour_covers_interventional_truth() {
    let ws = Workspace::simulated(3000, 12);
    let fit = ws.config("fit.json", &format!(r#"{{{INPUT}, "controls": {{"n_starts": 2, "seed": 1}}}}"#));
    ok(&["fit", "--config", &fit, "--out", &ws.out("fit")]);
    let curves = ws.config("curves.json", &format!(r#"{{{INPUT}, "fit": "fit/fit.json", "grid": [0.5, 1.0, 2.0]}}"#));
    ok(&["curves", "--config", &curves, "--out", &ws.out("curves")]);
    let theta = rows(&ws.root.join("curves/theta.csv"));
    assert_eq!(theta.len(), 3);
    let one = &theta[1];
    assert_eq!(one[0], "1");
    let (lo, hi): (f64, f64) = (one[3].parse().unwrap(), one[4].parse().unwrap());
    let truth = interventional_mc(&reference_scenario(3000, 12), &[Intervention::FixT { t: 1.0 }], 200_000).unwrap()[0];
    assert!(lo <= truth.theta && truth.theta <= hi, "[{lo}, {hi}] vs {}", truth.theta);
}

#[test]
fn shift_with_zero_delta_has_zero_difference() {
    let ws = Workspace::simulated(1000, 3);
    let cfg = ws.config(
        "shift.json",
        &format!(r#"{{{INPUT}, "controls": {{"n_starts": 1, "seed": 2}}, "deltas": [-15, 0, 15]}}"#),
    );
    ok(&["shift", "--config", &cfg, "--out", &ws.out("shift")]);
    let doc = json(&ws.root.join("shift/shift.json"));
    assert!(doc["config_sha256"].as_str().unwrap().len() == 64);
    let by_delta = doc["report"]["by_delta"].as_object().unwrap();
    assert_eq!(by_delta.len(), 3);
    let zero = by_delta.values().find(|e| e["policy"]["delta"].as_f64() == Some(0.0)).unwrap();
    assert_eq!(zero["theta_diff"]["estimate"].as_f64(), Some(0.0));
    assert_eq!(zero["gamma_diff"]["estimate"].as_f64(), Some(0.0));
}

#[test]
fn neutral_sensitivity_cell_matches_curves() {
    let ws = Workspace::simulated(800, 4);
    let controls = r#""controls": {"n_starts": 1, "seed": 6}"#;
    let sens = ws.config(
        "sens.json",
        &format!(r#"{{{INPUT}, {controls}, "psi_grid": [{{"psi0": 1, "psi1": 1}}], "times": [0.5, 2.0]}}"#),
    );
    ok(&["sensitivity", "--config", &sens, "--out", &ws.out("sens")]);
    let curves = ws.config("curves.json", &format!(r#"{{{INPUT}, {controls}, "grid": [0.5, 2.0]}}"#));
    ok(&["curves", "--config", &curves, "--out", &ws.out("curves")]);
    let table = rows(&ws.root.join("sens/sensitivity.csv"));
    let gamma = rows(&ws.root.join("curves/gamma.csv"));
    assert_eq!(table.len(), 2);
    for (r, g) in table.iter().zip(&gamma) {
        assert_eq!(r[2], g[0]);
        assert_eq!(r[3..7], g[1..5]);
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let ws = Workspace::simulated(600, 8);
    let cfg = ws.config("fit.json", &format!(r#"{{{INPUT}, "controls": {{"n_starts": 1, "seed": 4}}}}"#));
    ok(&["fit", "--config", &cfg, "--out", &ws.out("a")]);
    // the echo holds absolute paths, so it runs from anywhere
    ok(&["fit", "--config", &ws.out("a/config.json"), "--out", &ws.out("b")]);
    let (a, b) = (json(&ws.root.join("a/fit.json")), json(&ws.root.join("b/fit.json")));
    assert_eq!(a["config_sha256"], b["config_sha256"]);
    assert_eq!(
        std::fs::read(ws.root.join("a/fit.json")).unwrap(),
        std::fs::read(ws.root.join("b/fit.json")).unwrap()
    );
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let ws = Workspace::simulated(100, 1);
    let cfg = ws.config("fit.json", &format!(r#"{{{INPUT}, "contrls": {{}}}}"#));
    let out = run(&["fit", "--config", &cfg, "--out", &ws.out("x")]);
    assert_eq!(out.status.code(), Some(2));
    let diag: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim().lines().last().unwrap()).unwrap();
    assert_eq!(diag["exit"], 2);
}

#[test]
fn missing_data_file_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fit.json");
    std::fs::write(&cfg, r#"{"input": {"data": "nope.csv", "schema": "nope.json"}}"#).unwrap();
    let out = run(&["fit", "--config", &s(&cfg), "--out", &s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(4));
}
