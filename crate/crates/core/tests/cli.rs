use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use renewal_ldp::harness::read_csv;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_renewal-ldp")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn legendre_run_writes_reproducible_outputs() {
    let cfg = configs().join("legendre.toml");
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["legendre", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["results.csv", "report.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = read_csv(&a.join("results.csv")).unwrap();
    assert!(rows.iter().all(|r| r.kind == "legendre"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kind"], "legendre");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn seeds_flag_replaces_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lln.toml");
    let model = configs().join("../models/two_state_exp.toml");
    fs::write(&cfg, format!("model = {:?}\nschedule = [50.0]\n", model.display().to_string())).unwrap();
    let out = dir.path().join("out");
    let o = run(&["lln", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "4,9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([4, 9]));
}

#[test]
fn property_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("invariants_broken.toml");
    let o = run(&["invariants", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 0 sums to 0.9"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["lln", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "model = \"m.toml\"\nunknown_key = 3\n").unwrap();
    let o = run(&["lln", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));
}
