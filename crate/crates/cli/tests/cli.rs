use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
paths = 400
observation = "sine"

[time]
dt = 0.01
steps = 20

[sweep]
degrees = [0, 1]
dims = [3, 4]
random_starts = 2
quantiles = 50
density_grid = 40
"#;

fn obsfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obsfit")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_tagged_tables_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let res = obsfit(&["--config", &cfg, "--out", out.to_str().unwrap(), "simulate"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let m = manifest(&out);
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["status"], "ok");
    let hash = m["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let states = fs::read_to_string(out.join("states.csv")).unwrap();
    let first = states.lines().next().unwrap();
    assert_eq!(first, format!("# config_sha256={hash} seed=3"));
    let files: Vec<&str> = m["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(files.contains(&"states.csv") && files.contains(&"observations.csv"));
}

#[test]
fn seed_override_changes_tag_not_hash_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let res = obsfit(&["--config", &cfg, "--seed", "11", "--out", out.to_str().unwrap(), "simulate"]);
    assert!(res.status.success());
    let states = fs::read_to_string(out.join("observations.csv")).unwrap();
    assert!(states.lines().next().unwrap().ends_with("seed=11"));
}

#[test]
fn bad_expression_exits_with_config_code_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "seed = 1\n\n[model]\ndrift = \"x - * x\"\n";
    let cfg = write_config(tmp.path(), body);
    let out = tmp.path().join("out");
    let res = obsfit(&["--config", &cfg, "--out", out.to_str().unwrap(), "simulate"]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains(":4:") && err.contains("model.drift"), "{err}");
}

#[test]
fn unknown_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 1\nbogus = 2\n");
    let res = obsfit(&["--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap(), "simulate"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn zero_workers_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let res = obsfit(&["--config", &cfg, "--workers", "0", "--out", tmp.path().join("o").to_str().unwrap(), "simulate"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3_with_error_record() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}\n[model]\nname = \"double-well\"\ndrift = \"x^9 * 1000\"\n");
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("out");
    let res = obsfit(&["--config", &cfg, "--out", out.to_str().unwrap(), "simulate"]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(manifest(&out)["status"], "error");
    assert!(out.join("error.json").exists());
}

#[test]
fn sweep_outputs_are_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let run = |workers: &str| {
        let out = tmp.path().join(format!("w{workers}"));
        let res = obsfit(&["--config", &cfg, "--workers", workers, "--out", out.to_str().unwrap(), "sweep"]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        out
    };
    let (a, b) = (run("1"), run("2"));
    for name in ["sweep.csv", "cedr.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let sweep = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().nth(1).unwrap(), "degree,n,loss,w2_train,w2_test,converged,start,error");
    assert_eq!(sweep.lines().count(), 2 + 4);
}

#[test]
fn json_format_wraps_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let res = obsfit(&["--config", &cfg, "--format", "json", "--out", out.to_str().unwrap(), "cedr"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("cedr.json")).unwrap()).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(v["config_sha256"], manifest(&out)["config_sha256"]);
}
