use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use brokerfee::experiment::{content_hash, ExperimentConfig, Manifest};
use brokerfee::girsanov::read_batch;

fn config(mode: &str, extra: &str) -> String {
    format!(
        r#"[model]
sigma = 1.0
epsilon = 1.0
phi_a = 0.5
phi_p = 0.25
rate_lower = -1.0
rate_upper = 1.0
horizon = 1.0
reservation = 0.0
n_steps = 40
n_paths = 3000
seed = 5

[family]
class = "constants"
cap = 1.0

[run]
mode = "{mode}"
output = "unused"
{extra}
"#
    )
}

fn brokerfee(dir: &Path, mode: &str, text: &str, extra_args: &[&str]) -> Output {
    let path = dir.join(format!("{mode}.toml"));
    fs::write(&path, text).unwrap();
    Command::new(env!("CARGO_BIN_EXE_brokerfee"))
        .arg(mode)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join(mode))
        .args(extra_args)
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn assert_manifest_complete(dir: &Path) {
    let m = manifest(dir);
    let mut listed: Vec<String> = m.files.iter().map(|f| f.path.clone()).collect();
    listed.sort();
    let mut present: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    present.sort();
    assert_eq!(listed, present);
    for f in &m.files {
        assert_eq!(content_hash(&fs::read(dir.join(&f.path)).unwrap()), f.hash);
    }
    assert_eq!(ExperimentConfig::from_toml_str(&m.config).unwrap().to_toml_string(), m.config);
}

#[test]
fn verify_prints_a_line_per_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = brokerfee(tmp.path(), "verify", &config("verify", "instances = 6\ncollapse_trials = 10"), &["--threads", "1"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(lines.len(), 21, "{stdout}");
    assert!(lines.iter().any(|l| l.contains("oracle_gibbs")));
    assert_manifest_complete(&tmp.path().join("verify"));
    assert_eq!(manifest(&tmp.path().join("verify")).threads, Some(1));
}

#[test]
fn simulate_dumps_readable_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let out = brokerfee(tmp.path(), "simulate", &config("simulate", ""), &["--dump-paths", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("simulate");
    assert_manifest_complete(&dir);
    let batch = read_batch(fs::File::open(dir.join("paths.bfpb")).unwrap()).unwrap();
    assert_eq!(batch.len(), 3000);
    assert_eq!(manifest(&dir).seed, 9);
    let csv = fs::read_to_string(dir.join("simulate.csv")).unwrap();
    assert!(csv.starts_with("policy,normalization,normalization_se,entropy_lhs"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn oracle_and_agent_modes_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = brokerfee(tmp.path(), "oracle", &config("oracle", "instances = 4\ncollapse_trials = 5"), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_manifest_complete(&tmp.path().join("oracle"));
    let rows = fs::read_to_string(tmp.path().join("oracle/oracle.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);

    let out = brokerfee(tmp.path(), "agent", &config("agent", "coefficients = [0.1]"), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_manifest_complete(&tmp.path().join("agent"));
    assert!(tmp.path().join("agent/agent_policy.csv").exists());
}

#[test]
fn optimize_final_row_matches_limit_point() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = config("optimize", "budget = 8");
    text = text.replace("rate_lower = -1.0", "rate_lower = -50.0").replace("rate_upper = 1.0", "rate_upper = 50.0");
    let out = brokerfee(tmp.path(), "optimize", &text, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("optimize");
    assert_manifest_complete(&dir);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("convergence.json")).unwrap()).unwrap();
    let limit = report["limit_point"][0].as_f64().unwrap();
    let csv = fs::read_to_string(dir.join("sequence.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let incumbent: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(incumbent, limit);
}

#[test]
fn mismatched_mode_and_bad_keys_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    fs::write(&path, config("oracle", "")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_brokerfee"))
        .args(["simulate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.mode"));

    let out = brokerfee(tmp.path(), "oracle", &config("oracle", "instnces = 3"), &[]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("instnces") && err.contains("line"), "{err}");
}
