use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], config: Option<&str>, dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_excitable"));
    cmd.args(args).arg("--out").arg(dir.join("out"));
    if let Some(text) = config {
        let path = dir.join("config.json");
        std::fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn report(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out").join(name)).unwrap()).unwrap()
}

const SPIKE: &str = r#"{
    "schema_version": 1,
    "params": {"epsilon": 0.02, "i_app": 0.655, "v0": -0.3, "n0": -0.1586},
    "initial": {"v": -0.5, "n": -0.12},
    "integrator": {"t_end": 3000.0}
}"#;

#[test]
fn simulate_reports_one_spike() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate"], Some(SPIKE), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "simulate.json");
    assert_eq!(r["result"]["spikes"].as_array().unwrap().len(), 1);
    assert_eq!(r["result"]["termination"], "converged");
    let csv = std::fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,V,n"));
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run(&["simulate", "--seedless"], Some(SPIKE), a.path()).status.success());
    assert!(run(&["simulate", "--seedless"], Some(SPIKE), b.path()).status.success());
    let ta = std::fs::read(a.path().join("out/trajectory.csv")).unwrap();
    let tb = std::fs::read(b.path().join("out/trajectory.csv")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = r#"{
        "schema_version": 1,
        "params": {"epsilon": 0.02, "i_app": 0.655, "v0": -0.3, "n0": -0.1586},
        "protocol": {"segments": []}
    }"#;
    assert_eq!(run(&["simulate"], Some(empty), dir.path()).status.code(), Some(2));
    let zero = r#"{
        "schema_version": 1,
        "params": {"epsilon": 0.02, "i_app": 0.655, "v0": -0.3, "n0": -0.1586},
        "protocol": {"segments": [{"duration": 0.0, "i_app": 0.7}]}
    }"#;
    assert_eq!(run(&["simulate"], Some(zero), dir.path()).status.code(), Some(2));
    let unknown = r#"{"schema_version": 1, "params": {"epsilon": 0.02, "i_app": 0.6, "v0": 0.0, "n0": 0.0}, "extra": true}"#;
    assert_eq!(run(&["equilibria"], Some(unknown), dir.path()).status.code(), Some(2));
    let version = r#"{"schema_version": 7, "params": {"epsilon": 0.02, "i_app": 0.6, "v0": 0.0, "n0": 0.0}}"#;
    assert_eq!(run(&["equilibria"], Some(version), dir.path()).status.code(), Some(2));
    let bad_eps = r#"{"schema_version": 1, "params": {"epsilon": -1.0, "i_app": 0.6, "v0": 0.0, "n0": 0.0}}"#;
    assert_eq!(run(&["equilibria"], Some(bad_eps), dir.path()).status.code(), Some(2));
    assert_eq!(run(&["equilibria"], None, dir.path()).status.code(), Some(2));
}

#[test]
fn embedded_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["simulate"], Some(SPIKE), dir.path()).status.success());
    let r = report(dir.path(), "simulate.json");
    let resolved = serde_json::to_string(&r["config"]).unwrap();
    let again = tempfile::tempdir().unwrap();
    let out = run(&["simulate"], Some(&resolved), again.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report(again.path(), "simulate.json")["config"], r["config"]);
}

#[test]
fn equilibria_lists_three_in_region_iv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"schema_version": 1, "params": {"epsilon": 0.02, "i_app": 0.6666666666666666, "v0": -0.3, "n0": -0.1586}}"#;
    assert!(run(&["equilibria"], Some(cfg), dir.path()).status.success());
    let r = report(dir.path(), "equilibria.json");
    let eqs = r["result"]["equilibria"].as_array().unwrap();
    assert_eq!(eqs.len(), 3);
    assert!(eqs.iter().any(|e| e["kind"] == "saddle"));
}

#[test]
fn bifdiag_emits_fold_and_homoclinic_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
        "schema_version": 1,
        "params": {"epsilon": 0.02, "i_app": 0.6666666666666666, "v0": -0.3, "n0": -0.1586},
        "i_range": [0.6, 0.7],
        "options": {"cycle_samples": 5}
    }"#;
    let out = run(&["bifdiag"], Some(cfg), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let points = std::fs::read_to_string(dir.path().join("out/bifdiag_points.csv")).unwrap();
    let kinds: Vec<&str> = points.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(kinds.contains(&"SN"), "{points}");
    assert!(kinds.contains(&"homoclinic"), "{points}");
    let row = |k: &str| -> f64 {
        points.lines().find(|l| l.starts_with(&format!("{k},"))).unwrap().split(',').nth(1).unwrap().parse().unwrap()
    };
    assert!(row("homoclinic") < row("SN"));
}

#[test]
fn gspt_ic_sweep_has_a_row_per_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"schema_version": 1, "v0": -0.3, "n0": -0.1586}"#;
    let out = run(&["gspt", "ic-sweep"], Some(cfg), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/gspt_ic_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let r = report(dir.path(), "gspt_ic_sweep.json");
    assert_eq!(r["config"]["epsilons"].as_array().unwrap().len(), 4);
}

#[test]
fn gspt_absence_is_reported_in_band() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"schema_version": 1, "v0": 0.0, "n0": 0.03, "epsilons": [0.05, 0.02], "samples": 5}"#;
    let out = run(&["gspt", "absence"], Some(cfg), dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(dir.path(), "gspt_absence.json")["result"]["absent"], true);
}

#[test]
fn classify_region_i_carries_snic_evidence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"schema_version": 1, "v0": 0.0, "n0": 0.03, "epsilon": 0.02}"#;
    let out = run(&["classify"], Some(cfg), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "classify.json");
    assert_eq!(r["result"]["region"], "I");
    assert_eq!(r["result"]["snic"], true);
}

#[test]
fn chart_rows_match_grid_and_svg_has_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"schema_version": 1, "options": {"grid": [6, 5]}}"#;
    let out = run(&["chart", "--svg"], Some(cfg), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/chart.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30);
    let svg = std::fs::read_to_string(dir.path().join("out/chart.svg")).unwrap();
    assert!(svg.contains("<circle"));
    assert!(svg.matches("<polyline").count() >= 2);
    let r = report(dir.path(), "chart.json");
    let pf = r["result"]["pitchfork"].as_array().unwrap();
    assert!((pf[0].as_f64().unwrap() + 0.58731).abs() < 1e-4);
    // nothing else lands in the output directory
    let names: Vec<String> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 3, "{names:?}");
}
