//! Batch runs driven by a TOML config: one mode per run, CSV/JSON outputs,
//! a summary and a manifest with a content hash for every file written.

pub mod checks;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{best_response, estimate_agent_value, ResponseMethod};
use crate::contracts::FamilySpec;
use crate::error::{Error, Result};
use crate::girsanov::{entropy_report_streaming, normalization, simulate_controlled, simulate_reference, write_batch};
use crate::model::ModelParams;
use crate::principal::{convergence_report, optimize, MaximizingSequence};
use crate::rng::split_seed;

use checks::{reference_policies, run_suite, CheckResult, OracleRow, SuiteOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Agent,
    Oracle,
    Optimize,
    Verify,
    Report,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Agent => "agent",
            Mode::Oracle => "oracle",
            Mode::Optimize => "optimize",
            Mode::Verify => "verify",
            Mode::Report => "report",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        toml::Value::String(s.to_string())
            .try_into()
            .map_err(|_| Error::Config(format!("unknown mode `{s}`")))
    }
}

fn default_budget() -> usize {
    200
}

fn default_instances() -> usize {
    100
}

fn default_trials() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub mode: Mode,
    pub output: PathBuf,
    /// Objective evaluations in `optimize` mode.
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Family coefficients of the fee used in `agent` mode; zeros if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<f64>>,
    /// Random tree instances in `oracle` and `verify` modes.
    #[serde(default = "default_instances")]
    pub instances: usize,
    /// Randomizations per instance in the collapse check.
    #[serde(default = "default_trials")]
    pub collapse_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub family: FamilySpec,
    pub run: RunBlock,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.clone().validate()?;
        self.family.validate()?;
        if self.run.budget == 0 {
            return Err(Error::Config("run.budget must be at least 1".into()));
        }
        if let Some(c) = &self.run.coefficients {
            if c.len() != self.family.dimension() {
                return Err(Error::Config(format!(
                    "run.coefficients has {} entries; the family has {}",
                    c.len(),
                    self.family.dimension()
                )));
            }
        }
        Ok(())
    }
}

/// Command-line settings that override or extend the config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub dump_paths: bool,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    /// SHA-256 of `"blob <len>\0" + content`.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub mode: Mode,
    pub seed: u64,
    pub threads: Option<usize>,
    /// The effective config, after command-line overrides.
    pub config: String,
    pub files: Vec<ManifestEntry>,
}

/// Git-style blob hash with SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub directory: PathBuf,
    pub manifest: Manifest,
    pub summary: String,
    /// Per-check results in `verify` mode.
    pub checks: Vec<CheckResult>,
}

impl RunOutcome {
    /// All checks passed (vacuously true outside `verify` mode).
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(ManifestEntry { path: name.into(), bytes: bytes.len() as u64, hash: content_hash(bytes) });
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write(name, &bytes)
    }
}

fn writable_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Runs the configured mode and writes every output under the run directory.
pub fn run(config: &ExperimentConfig, overrides: &Overrides) -> Result<RunOutcome> {
    let mut config = config.clone();
    if let Some(seed) = overrides.seed {
        config.model.seed = seed;
    }
    if let Some(out) = &overrides.output {
        config.run.output = out.clone();
    }
    config.validate()?;
    let dir = config.run.output.clone();
    writable_dir(&dir)?;
    let mut out = Outputs { dir: dir.clone(), files: Vec::new() };
    let params = &config.model;
    let mut summary = format!("mode: {}\nseed: {}\n", config.run.mode.name(), params.seed);
    let mut checks = Vec::new();
    match config.run.mode {
        Mode::Simulate => simulate(params, overrides.dump_paths, &mut out, &mut summary)?,
        Mode::Agent => agent(&config, overrides.dump_paths, &mut out, &mut summary)?,
        Mode::Oracle => {
            let rows = checks::oracle_rows(params, config.run.instances, config.run.collapse_trials)?;
            out.csv("oracle.csv", &rows)?;
            summarize_oracle(&rows, &mut summary);
        }
        Mode::Optimize => {
            let (best, sequence) = optimize(&config.family, params, config.run.budget)?;
            write_sequence(&sequence, &mut out)?;
            let _ = writeln!(summary, "evaluations: {}\nincumbent: {}", sequence.len(), best.to_record());
            if let Some(r) = sequence.incumbent() {
                let _ = writeln!(
                    summary,
                    "principal value: {:.6e} (se {:.2e})\nagent value: {:.6e}",
                    r.principal_value.mean, r.principal_value.se, r.agent_value.mean
                );
            }
            if sequence.len() >= 2 {
                report(&sequence, &mut out, &mut summary)?;
            }
        }
        Mode::Report => {
            let path = dir.join("sequence.json");
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("report needs {} from an optimize run: {e}", path.display())))?;
            let sequence = MaximizingSequence::from_json(&text)?;
            report(&sequence, &mut out, &mut summary)?;
        }
        Mode::Verify => {
            let options = SuiteOptions {
                paths: params.n_paths,
                oracle_instances: config.run.instances,
                collapse_trials: config.run.collapse_trials,
            };
            let (results, rows) = run_suite(params, &options)?;
            out.csv("verify.csv", &results)?;
            out.csv("oracle.csv", &rows)?;
            for c in &results {
                let _ = writeln!(summary, "{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
            }
            checks = results;
        }
    }
    out.write("summary.txt", summary.as_bytes())?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        mode: config.run.mode,
        seed: params.seed,
        threads: overrides.threads,
        config: config.to_toml_string(),
        files: out.files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunOutcome { directory: dir, manifest, summary, checks })
}

#[derive(Serialize)]
struct SimulateRow {
    policy: String,
    normalization: f64,
    normalization_se: f64,
    entropy_lhs: f64,
    entropy_lhs_se: f64,
    entropy_rhs: f64,
    entropy_rhs_se: f64,
}

fn simulate(params: &ModelParams, dump: bool, out: &mut Outputs, summary: &mut String) -> Result<()> {
    let seed = split_seed(params.seed, 1);
    let mut rows = Vec::new();
    for (name, policy) in reference_policies(params) {
        let m = normalization(params, policy.as_ref(), params.n_paths, seed);
        let e = entropy_report_streaming(params, policy.as_ref(), params.n_paths, seed);
        let _ = writeln!(summary, "{name}: E[M] = {:.6} (se {:.2e})", m.mean, m.se);
        rows.push(SimulateRow {
            policy: name,
            normalization: m.mean,
            normalization_se: m.se,
            entropy_lhs: e.lhs.mean,
            entropy_lhs_se: e.lhs.se,
            entropy_rhs: e.rhs.mean,
            entropy_rhs_se: e.rhs.se,
        });
    }
    out.csv("simulate.csv", &rows)?;
    if dump {
        let batch = simulate_reference(params, params.n_paths, seed);
        let mut bytes = Vec::new();
        write_batch(&batch, &mut bytes)?;
        out.write("paths.bfpb", &bytes)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AgentRow {
    method: ResponseMethod,
    value: f64,
    value_se: f64,
    monte_carlo: f64,
    monte_carlo_se: f64,
    converged: bool,
}

fn agent(config: &ExperimentConfig, dump: bool, out: &mut Outputs, summary: &mut String) -> Result<()> {
    let params = &config.model;
    let coefficients = config.run.coefficients.clone().unwrap_or_else(|| vec![0.0; config.family.dimension()]);
    let contract = config.family.contract_from(&coefficients);
    let response = best_response(&contract, params)?;
    let mc = estimate_agent_value(&contract, &response.policy, params, params.n_paths, split_seed(params.seed, 4));
    out.csv(
        "agent.csv",
        &[AgentRow {
            method: response.method,
            value: response.value.mean,
            value_se: response.value.se,
            monte_carlo: mc.mean,
            monte_carlo_se: mc.se,
            converged: response.converged,
        }],
    )?;
    let mut bytes = Vec::new();
    response.policy.write_csv(&mut bytes)?;
    out.write("agent_policy.csv", &bytes)?;
    if !response.trace.is_empty() {
        #[derive(Serialize)]
        struct TraceRow {
            sweep: usize,
            value: f64,
        }
        let rows: Vec<TraceRow> =
            response.trace.iter().enumerate().map(|(sweep, value)| TraceRow { sweep, value: *value }).collect();
        out.csv("agent_trace.csv", &rows)?;
    }
    let _ = writeln!(
        summary,
        "fee: {}\nmethod: {:?}\nvalue: {:.6e}\nmonte carlo: {:.6e} (se {:.2e})",
        contract.to_record(),
        response.method,
        response.value.mean,
        mc.mean,
        mc.se
    );
    if dump {
        let batch = simulate_controlled(params, &response.policy, params.n_paths, split_seed(params.seed, 4));
        let mut bytes = Vec::new();
        write_batch(&batch, &mut bytes)?;
        out.write("paths.bfpb", &bytes)?;
    }
    Ok(())
}

fn summarize_oracle(rows: &[OracleRow], summary: &mut String) {
    let max = |f: fn(&OracleRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let _ = writeln!(
        summary,
        "instances: {}\nmax |relaxed - strong|: {:.3e}\ncollapse counterexamples: {}\nmax extraction violation: {:.3e}",
        rows.len(),
        max(|r| r.gap),
        rows.iter().map(|r| r.counterexamples).sum::<usize>(),
        max(|r| r.max_violation)
    );
}

fn write_sequence(sequence: &MaximizingSequence, out: &mut Outputs) -> Result<()> {
    let mut bytes = Vec::new();
    sequence.write_csv(&mut bytes)?;
    out.write("sequence.csv", &bytes)?;
    out.write("sequence.json", sequence.to_json().as_bytes())
}

fn report(sequence: &MaximizingSequence, out: &mut Outputs, summary: &mut String) -> Result<()> {
    let rep = convergence_report(sequence)?;
    out.write("convergence.json", serde_json::to_string_pretty(&rep)?.as_bytes())?;
    let _ = writeln!(
        summary,
        "incumbent updates: {}\ncauchy tail: {:.3e}\nlimit point: {:?}",
        rep.incumbent_updates, rep.cauchy_tail, rep.limit_point
    );
    Ok(())
}
