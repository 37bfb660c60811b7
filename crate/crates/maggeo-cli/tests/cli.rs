use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn maggeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maggeo")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn find_perturbed(out: &Path) {
    let o = maggeo(&["find", "--eps", "0.01", "--rng", "7", "--seeds", "60", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&maggeo(&["bogus"])), 1);
    assert_eq!(code(&maggeo(&["find", "--seeds", "many"])), 1);
    assert_eq!(code(&maggeo(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = maggeo(&["simulate", "--metric", "sphere", "--out", out]);
    assert_eq!(code(&o), 1);
    let o = maggeo(&["reduce", "--k0", "-1", "--out", out]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_metric_file_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("metric.json");
    std::fs::write(&file, r#"{"kind": "conformal_zonal", "coeficients": [0.1]}"#).unwrap();
    let spec = format!("@{}", file.display());
    let o = maggeo(&["simulate", "--metric", &spec, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("coeficients"), "{err}");
}

#[test]
fn simulate_writes_closed_latitude() {
    let dir = tempfile::tempdir().unwrap();
    let o = maggeo(&["simulate", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# manifest "));
    assert_eq!(lines.next().unwrap(), "t,x1,x2,x3,v1,v2,v3,speed_g");
    let summary = read_json(&dir.path().join("summary.json"));
    assert!(summary["closure_error"].as_f64().unwrap() < 1e-9);
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["manifest_hash"], summary["manifest_hash"]);
}

#[test]
fn find_then_index_gives_two_orbits_of_degree_minus_one() {
    let dir = tempfile::tempdir().unwrap();
    find_perturbed(dir.path());
    let catalog = read_json(&dir.path().join("catalog.json"));
    assert_eq!(catalog["orbits"].as_array().unwrap().len(), 2);
    let cat = dir.path().join("catalog.json");
    let o = maggeo(&["index", "--catalog", cat.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let degrees = read_json(&dir.path().join("degrees.json"));
    assert_eq!(degrees["degrees"], serde_json::json!([-1, -1]));
    assert_eq!(degrees["degree_sum"], -2);
}

#[test]
fn runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    find_perturbed(a.path());
    find_perturbed(b.path());
    // Only the --out path differs, and it is part of the config, so compare orbits.
    let ca = read_json(&a.path().join("catalog.json"));
    let cb = read_json(&b.path().join("catalog.json"));
    assert_eq!(serde_json::to_string(&ca["orbits"]).unwrap(), serde_json::to_string(&cb["orbits"]).unwrap());
    assert_eq!(ca["search"], cb["search"]);

    // Same output directory twice: every file identical.
    let c = tempfile::tempdir().unwrap();
    let out = c.path().to_str().unwrap();
    assert_eq!(code(&maggeo(&["reduce", "--eps", "0.02", "--out", out])), 0);
    let first = std::fs::read(c.path().join("reduction.json")).unwrap();
    assert_eq!(code(&maggeo(&["reduce", "--eps", "0.02", "--out", out])), 0);
    assert_eq!(first, std::fs::read(c.path().join("reduction.json")).unwrap());
}

#[test]
fn degenerate_family_index_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = maggeo(&["find", "--k", "1", "--seeds", "2", "--out", out]);
    assert_eq!(code(&o), 0);
    let cat = dir.path().join("catalog.json");
    let o = maggeo(&["index", "--catalog", cat.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let degrees = read_json(&dir.path().join("degrees.json"));
    assert!(degrees["degree_sum"].is_null());
}

#[test]
fn tampered_catalog_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    find_perturbed(dir.path());
    let path = dir.path().join("catalog.json");
    let mut cat = read_json(&path);
    let period = cat["orbits"][0]["period"].as_f64().unwrap();
    cat["orbits"][0]["period"] = serde_json::json!(period * 0.9);
    std::fs::write(&path, serde_json::to_string(&cat).unwrap()).unwrap();
    let o = maggeo(&["index", "--catalog", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn audit_round_unit_curvature() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = maggeo(&["audit", "--k", "1", "--seeds", "1", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&dir.path().join("audit.json"));
    let h = &report["hypotheses"];
    for name in ["injectivity", "positive_curvature", "pinching"] {
        assert!(h[name]["verdict"].is_string(), "{name}");
    }
    assert_eq!(h["positive_curvature"]["verdict"], "satisfied");
    assert_eq!(h["pinching"]["verdict"], "satisfied");
    for r in report["gb_residuals"].as_array().unwrap() {
        assert!(r.as_f64().unwrap().abs() < 1e-3);
    }
}

#[test]
fn continuation_conserves_degree_sum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = maggeo(&["continue", "--metric", "zonal:0.1", "--k", "1+0.3*z", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = read_json(&dir.path().join("continuation.json"));
    assert_eq!(log["final_degree_sum"], -2);
    for s in log["degree_sums"].as_array().unwrap() {
        assert_eq!(s["sum"], -2);
    }
    let csv = std::fs::read_to_string(dir.path().join("continuation.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "stage,t,branch,residual,degree,period");
}
