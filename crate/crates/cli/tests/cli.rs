use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_noir-mpc"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn validate_accepts_shipped_scenarios() {
    for name in ["two_road.json", "phoenix.json"] {
        let out = bin().args(["validate", "--scenario"]).arg(scenario(name)).output().unwrap();
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn validate_rejects_inconsistent_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("two_road.json")).unwrap().replace("\"r\": [1]", "\"r\": [2]");
    let path = dir.path().join("bad.json");
    fs::write(&path, text).unwrap();
    let out = bin().args(["validate", "--scenario"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("r[0]"));
}

#[test]
fn simulate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["simulate", "--scenario"])
        .arg(scenario("two_road.json"))
        .args(["--steps", "5", "--beta", "2", "--u0", "3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let inflows = fs::read_to_string(dir.path().join("inflows.csv")).unwrap();
    assert_eq!(inflows.lines().count(), 6);
    assert_eq!(inflows.lines().nth(1).unwrap(), "0,3");
    for name in ["outflows.csv", "density.csv", "verdict.txt", "report.json", "scenario.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn stability_lists_phases() {
    let out = bin().args(["stability", "--scenario"]).arg(scenario("phoenix.json")).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("phase ")).count(), 12);
    assert!(text.contains("(stable)"));
}

#[test]
fn phoenix_short_run_with_debug_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("NOIR_MPC_LOG", "debug")
        .args(["phoenix", "--steps", "3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("DEBUG"));
    let density = fs::read_to_string(dir.path().join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 4);
}

#[test]
fn missing_file_fails() {
    let out = bin().args(["validate", "--scenario", "/nonexistent.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
