//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use brokerfee::agent::{estimate_agent_value, solve_hjb};
use brokerfee::contracts::{Contract, FamilySpec};
use brokerfee::experiment::checks::max_moment_z;
use brokerfee::girsanov::{entropy_report_streaming, normalization, reduced};
use brokerfee::model::ModelParams;
use brokerfee::oracle::{
    build_tree, extract_strong_control, random_instance, solve_strong_discrete, verify_collapse, Channel,
    DiscreteConstraintSet,
};
use brokerfee::policy::{ConstantRate, LinearSignalRate, StateCoord, TradingRate};
use brokerfee::principal::{optimize_with, SearchOptions};
use brokerfee::rng::split_seed;

const SEED: u64 = 20_240_601;

/// Unit volatilities with tight rate bounds.
fn verification_params() -> ModelParams {
    ModelParams {
        sigma: 1.0,
        epsilon: 1.0,
        phi_a: 0.5,
        phi_p: 0.25,
        rate_lower: -1.0,
        rate_upper: 1.0,
        horizon: 1.0,
        reservation: 0.0,
        n_steps: 250,
        n_paths: 100_000,
        seed: SEED,
    }
}

/// Bounds wide enough never to bind.
fn closed_form_params() -> ModelParams {
    ModelParams {
        sigma: 1.0,
        epsilon: 0.5,
        phi_a: 0.5,
        phi_p: 0.25,
        rate_lower: -100.0,
        rate_upper: 100.0,
        horizon: 1.0,
        reservation: 0.0,
        n_steps: 250,
        n_paths: 100_000,
        seed: SEED,
    }
}

fn policies(p: &ModelParams) -> Vec<(&'static str, Box<dyn TradingRate>)> {
    vec![
        ("L", Box::new(ConstantRate(p.rate_lower))),
        ("0", Box::new(ConstantRate(0.0))),
        ("U", Box::new(ConstantRate(p.rate_upper))),
        ("signal", Box::new(LinearSignalRate::new(p, 0.0))),
    ]
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn girsanov_normalization() -> Outcome {
    let p = verification_params();
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, policy) in policies(&p) {
        let start = Instant::now();
        let m = normalization(&p, policy.as_ref(), p.n_paths, split_seed(SEED, 1));
        let elapsed = start.elapsed();
        let ok = m.within(1.0, 3.0) && elapsed < Duration::from_secs(30);
        passed &= ok;
        parts.push(format!("{name}: z={:+.2} {:.1}s", m.z_score(1.0), elapsed.as_secs_f64()));
    }
    outcome(passed, parts.join(", "))
}

fn entropy_identity() -> Outcome {
    let p = verification_params();
    let r = reduced::entropy_report(2.0, 1.0, p.n_steps, p.n_paths, split_seed(SEED, 2));
    let mut passed = r.lhs.within(2.0, 3.0) && r.rhs.within(2.0, 3.0);
    let mut parts = vec![format!("reduced lhs={:.4} rhs={:.4}", r.lhs.mean, r.rhs.mean)];
    for (name, policy) in policies(&p) {
        let r = entropy_report_streaming(&p, policy.as_ref(), p.n_paths, split_seed(SEED, 2));
        passed &= r.agrees(3.0);
        parts.push(format!("{name}: {:.2} se", (r.lhs.mean - r.rhs.mean).abs() / r.combined_se()));
    }
    outcome(passed, parts.join(", "))
}

fn agent_closed_form() -> Outcome {
    let p = closed_form_params();
    let start = Instant::now();
    let (policy, grid) = solve_hjb(&Contract::constant(0.0), &p).unwrap();
    let elapsed = start.elapsed();
    let shape: Vec<usize> = grid.axes.iter().map(|a| a.axis.count - 1).collect();
    let half: Vec<f64> = policy.axes().iter().map(|a| 0.5 * (a.axis.max - a.axis.min)).collect();
    let w_slot = policy.axes().iter().position(|a| a.coord == StateCoord::Signal).unwrap();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in 0..policy.len() {
        let (t, coords) = policy.node_of(k);
        if coords.iter().zip(&half).any(|(c, h)| c.abs() > 0.8 * h) {
            continue;
        }
        let exact = coords[w_slot] * (p.horizon - t) / (2.0 * p.phi_a);
        worst = worst.max((policy.values()[k] - exact).abs());
        scale = scale.max(exact.abs());
    }
    let value_error = (grid.origin_value() * 24.0 - 1.0).abs();
    let policy_error = worst / scale;
    let passed = shape == [200, 200] && policy_error <= 0.02 && value_error <= 0.01 && elapsed < Duration::from_secs(60);
    outcome(
        passed,
        format!(
            "policy sup error {:.2}%, value {:.6} ({:.2}% off), {:.1}s",
            100.0 * policy_error,
            grid.origin_value(),
            100.0 * value_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn agent_monte_carlo() -> Outcome {
    let p = closed_form_params();
    let zero = Contract::constant(0.0);
    let (policy, grid) = solve_hjb(&zero, &p).unwrap();
    let v = grid.origin_value();
    let mc = estimate_agent_value(&zero, &policy, &p, p.n_paths, split_seed(SEED, 4));
    let tolerance = (0.01 * v.abs()).max(3.0 * mc.se);
    outcome(
        (mc.mean - v).abs() <= tolerance,
        format!("grid {v:.6}, monte carlo {:.6} (se {:.1e}), tolerance {tolerance:.1e}", mc.mean, mc.se),
    )
}

fn principal_constants() -> Outcome {
    let p = closed_form_params();
    let start = Instant::now();
    let family = FamilySpec::Constants { cap: 1.0 };
    let (best, seq) = optimize_with(&family, &p, &SearchOptions { budget: 50, ..SearchOptions::default() }).unwrap();
    let elapsed = start.elapsed();
    let fee = best.as_constant().unwrap();
    let value = seq.incumbent().unwrap().principal_value.mean;
    let fee_error = (fee * 24.0 - 1.0).abs();
    let value_error = (value * 48.0 - 1.0).abs();
    outcome(
        fee_error <= 0.02 && value_error <= 0.02 && seq.len() <= 50 && elapsed < Duration::from_secs(600),
        format!(
            "fee {fee:.6} ({:.2}% off), J_p {value:.6} ({:.2}% off), {} evaluations, {:.1}s",
            100.0 * fee_error,
            100.0 * value_error,
            seq.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Objective of the two-atom problem as a function of the first density,
/// the second being fixed by normalization.
fn two_atom_objective(m: f64) -> f64 {
    let h = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    0.5 * (m - h(m)) + 0.5 * (-(2.0 - m) - h(2.0 - m))
}

/// Exhaustive search over a grid on `(0, 2)`, zoomed around the best node.
fn brute_force_two_atoms() -> f64 {
    let (mut lo, mut hi) = (0.0, 2.0);
    let (mut best, mut arg) = (f64::NEG_INFINITY, 1.0);
    for _ in 0..8 {
        let n = 10_000;
        let h = (hi - lo) / n as f64;
        for i in 0..=n {
            let m = lo + i as f64 * h;
            let v = two_atom_objective(m);
            if v > best {
                best = v;
                arg = m;
            }
        }
        lo = (arg - 2.0 * h).max(0.0);
        hi = (arg + 2.0 * h).min(2.0);
    }
    best
}

fn oracle_gibbs() -> Outcome {
    let p = ModelParams::default();
    let tree = build_tree(1, 2, &[Channel::Inventory], &p).unwrap();
    let s = solve_strong_discrete(&tree.probabilities(), &[1.0, -1.0], 1.0, &DiscreteConstraintSet::normalization_only())
        .unwrap();
    let brute = brute_force_two_atoms();
    let passed = (s.value - brute).abs() <= 1e-8 && (s.value - 0.433781).abs() <= 1e-6;
    outcome(passed, format!("strong {:.10}, brute force {brute:.10}, log cosh 1 = {:.10}", s.value, 1f64.cosh().ln()))
}

fn strong_relaxed_equality() -> Outcome {
    let p = ModelParams::default();
    let start = Instant::now();
    let mut worst_gap: f64 = 0.0;
    let mut counterexamples = 0;
    let mut not_dirac = 0;
    for i in 0..100u64 {
        let inst = random_instance(split_seed(SEED, 1000 + i), &p, i % 2 == 1).unwrap();
        assert!(inst.tree.depth <= 2 && inst.tree.branching == 2);
        let strong = inst.solve_strong().unwrap();
        let relaxed = inst.solve_relaxed(Some(&strong.density)).unwrap();
        worst_gap = worst_gap.max((relaxed.value - strong.value).abs());
        let rep =
            verify_collapse(&inst.tree, &inst.utility, inst.lambda, &inst.constraints, 100, split_seed(SEED, 5000 + i))
                .unwrap();
        counterexamples += rep.counterexamples.len();
        not_dirac += usize::from(!rep.relaxed_is_dirac);
    }
    let elapsed = start.elapsed();
    outcome(
        worst_gap <= 1e-8 && counterexamples == 0 && elapsed < Duration::from_secs(300),
        format!(
            "max gap {worst_gap:.2e}, {counterexamples} counterexamples, {not_dirac} non-Dirac LP solutions, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn extraction_admissibility() -> Outcome {
    let p = ModelParams::default();
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for i in 0..100u64 {
        let inst = random_instance(split_seed(SEED, 9000 + i), &p, true).unwrap();
        let strong = inst.solve_strong().unwrap();
        let relaxed = inst.solve_relaxed(Some(&strong.density)).unwrap();
        let rep = extract_strong_control(&inst.tree, &relaxed.control, &inst.spec(), &inst.enforced_rows);
        worst = worst.max(rep.max_violation);
        instances += 1;
    }
    outcome(worst <= 1e-8, format!("{instances} constrained instances, max violation {worst:.2e}"))
}

fn constraint_moments() -> Outcome {
    let p = verification_params();
    let all: Vec<usize> = (0..6).collect();
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, policy) in policies(&p) {
        let z = max_moment_z(&p, policy.as_ref(), p.n_paths, &all);
        passed &= z <= 3.0;
        parts.push(format!("{name}: max z {z:+.2}"));
    }
    let z = max_moment_z(&p, &ConstantRate(p.rate_upper + 1.0), p.n_paths, &[4]);
    passed &= z > 3.0;
    parts.push(format!("U+1: rate-cap row z {z:+.1}"));
    outcome(passed, parts.join(", "))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        r#"[model]
sigma = 1.0
epsilon = 0.5
phi_a = 0.5
phi_p = 0.25
rate_lower = -2.0
rate_upper = 2.0
horizon = 1.0
reservation = 0.0
n_steps = 100
n_paths = 20000
seed = 11

[family]
class = "constants"
cap = 1.0

[run]
mode = "optimize"
output = "unused"
budget = 12
"#,
    )
    .unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("run{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_brokerfee"))
            .args(["optimize", "--threads", "1", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, String::from_utf8_lossy(&status.stderr).into_owned());
        }
        runs.push(csv_files(&out));
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    outcome(!runs[0].is_empty() && runs[0] == runs[1], format!("identical: {names:?}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("girsanov normalization", girsanov_normalization),
        ("entropy identity", entropy_identity),
        ("agent closed form", agent_closed_form),
        ("monte carlo vs grid value", agent_monte_carlo),
        ("principal optimum over constants", principal_constants),
        ("gibbs value on two atoms", oracle_gibbs),
        ("strong/relaxed equality and collapse", strong_relaxed_equality),
        ("extraction admissibility", extraction_admissibility),
        ("constraint moments", constraint_moments),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!("{:>2}. {} {name}: {}", i + 1, if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
