use std::fs;
use std::path::Path;
use std::process::Command;

use fracou::control::OmegaSpec;
use fracou::field::{load_fouf, save_fouf, white_noise, Field, Grid};
use serde_json::{json, Value};

fn fracou(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_fracou")).args(args).output().expect("binary runs");
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn kolmogorov() -> Value {
    json!({ "B": [[0.0, 1.0], [0.0, 0.0]], "Q": [[0.0, 0.0], [0.0, 2.519842099789746]], "s": 0.75 })
}

fn heat_stripes() -> Value {
    json!({
        "model": { "B": [[0.0]], "Q": [[2.519842099789746]], "s": 0.75 },
        "grid": { "L": [20.0], "N": [128] },
        "omega": { "shape": { "kind": "stripes", "period": 1.25, "width": 0.625 }, "gamma": 0.3, "a": [1.25] },
        "field": { "kind": "gaussian", "width": 1.0 },
        "hum": { "nt": 32 }
    })
}

#[test]
fn analyze_reports_kolmogorov_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &json!({ "model": kolmogorov() }));
    let out = tmp.path().join("out");
    assert_eq!(fracou(&["analyze", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let a: Value = serde_json::from_str(&fs::read_to_string(out.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(a["structure"]["r"], json!(1));
    assert_eq!(a["exponents"]["dissipation_m"], json!(2.5));
    let m = manifest(&out);
    assert_eq!(m["exit_code"], json!(0));
    assert_eq!(m["config"]["model"], kolmogorov());
}

#[test]
fn evolve_at_time_zero_is_bitwise_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = Grid::new(vec![8.0, 8.0], vec![32, 16]).unwrap();
    let input = tmp.path().join("u0.fouf");
    save_fouf(&white_noise(&grid, 4), &input).unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &json!({ "model": kolmogorov(), "field": { "kind": "fouf", "path": "u0.fouf" }, "evolve": { "times": [0.0, 0.2] } }),
    );
    let out = tmp.path().join("out");
    assert_eq!(fracou(&["evolve", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    assert_eq!(fs::read(&input).unwrap(), fs::read(out.join("snapshot_0000.fouf")).unwrap());
    assert_ne!(fs::read(&input).unwrap(), fs::read(out.join("snapshot_0001.fouf")).unwrap());
}

#[test]
fn unknown_keys_exit_with_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &json!({ "model": kolmogorov(), "modle": 1 }));
    let out = tmp.path().join("out");
    assert_eq!(fracou(&["analyze", "--config", &cfg, "--out", out.to_str().unwrap()]), 1);
    let m = manifest(&out);
    assert_eq!(m["error"]["code"], json!("schema"));
    assert_eq!(m["config"]["modle"], json!(1));

    let cfg = write_config(tmp.path(), "d.json", &json!({ "model": kolmogorov() }));
    assert_eq!(fracou(&["analyze", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "analyze.tol=1"]), 1);
    assert_eq!(manifest(&out)["error"]["code"], json!("schema"));
}

#[test]
fn missing_config_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let missing = tmp.path().join("absent.json");
    assert_eq!(fracou(&["analyze", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
    assert_eq!(manifest(&out)["error"]["code"], json!("io"));
}

#[test]
fn thin_set_fails_the_thickness_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = heat_stripes();
    cfg["omega"]["gamma"] = json!(0.8);
    let cfg = write_config(tmp.path(), "c.json", &cfg);
    let out = tmp.path().join("out");
    assert_eq!(fracou(&["thickness", "--config", &cfg, "--out", out.to_str().unwrap()]), 2);
    assert_eq!(manifest(&out)["pass"], json!(false));
    assert_eq!(fracou(&["thickness", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "omega.gamma=0.3"]), 0);
}

#[test]
fn hum_writes_controls_supported_in_omega() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &heat_stripes());
    let out = tmp.path().join("out");
    assert_eq!(fracou(&["hum", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let m = manifest(&out);
    assert_eq!(m["resolved_config"]["hum"]["nt"], json!(32));
    assert!(m["summary"]["terminal_ratio"].as_f64().unwrap() < 1e-2);
    let omega: OmegaSpec = serde_json::from_value(heat_stripes()["omega"].clone()).unwrap();
    let omega = omega.build(&Grid::new(vec![20.0], vec![128]).unwrap(), tmp.path()).unwrap();
    for i in [0, 16, 32] {
        let u = load_fouf(&out.join(format!("control_{i:04}.fouf"))).unwrap();
        assert!(u.values().iter().zip(&omega.indicator).all(|(v, &inside)| inside || v.norm() == 0.0));
        assert!(u.values().iter().any(|v| v.norm() > 0.0));
    }
    assert!(out.join("terminal.fouf").exists() && out.join("g_terminal.fouf").exists());
}

#[test]
fn hum_with_zero_data_needs_no_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = Grid::new(vec![20.0], vec![128]).unwrap();
    save_fouf(&Field::zeros(&grid), &tmp.path().join("zero.fouf")).unwrap();
    let mut cfg = heat_stripes();
    cfg["field"] = json!({ "kind": "fouf", "path": "zero.fouf" });
    let cfg = write_config(tmp.path(), "c.json", &cfg);
    let out = tmp.path().join("out");
    assert_eq!(fracou(&["hum", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let m = manifest(&out);
    assert_eq!(m["summary"]["iterations"], json!(0));
    assert_eq!(m["summary"]["terminal_norm"], json!(0.0));
}

#[test]
fn reports_are_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = heat_stripes();
    cfg["spectral"] = json!({ "ks": [1.0, 2.0, 4.0, 8.0], "samples": 20 });
    let cfg = write_config(tmp.path(), "c.json", &cfg);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(fracou(&["spectral", "--config", &cfg, "--out", a.to_str().unwrap(), "--threads", "1", "--seed", "9"]), 0);
    assert_eq!(fracou(&["spectral", "--config", &cfg, "--out", b.to_str().unwrap(), "--threads", "3", "--seed", "9"]), 0);
    for f in ["spectral.json", "spectral.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(manifest(&a)["seed"], json!(9));
}
