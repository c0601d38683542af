//! The invariant suite behind `verify` mode.

use serde::Serialize;

use crate::agent::{estimate_agent_value, solve_hjb};
use crate::contracts::Contract;
use crate::error::Result;
use crate::girsanov::{constraint_moments_streaming, entropy_report_streaming, normalization, reduced, EtaTest};
use crate::model::{ModelParams, CONSTRAINT_ROWS};
use crate::oracle::{
    build_tree, extract_strong_control, random_instance, solve_strong_discrete, Channel, DiscreteConstraintSet,
    RelaxedControlDiscrete,
};
use crate::policy::{ConstantRate, LinearSignalRate, TradingRate};
use crate::rng::split_seed;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// The quantity compared against the threshold.
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        Self { name: name.into(), statistic, threshold, passed: statistic <= threshold }
    }

    fn at_least(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        Self { name: name.into(), statistic, threshold, passed: statistic >= threshold }
    }
}

/// Sizes of the suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub paths: usize,
    pub oracle_instances: usize,
    pub collapse_trials: usize,
}

/// Rates `L`, `0`, `U` and the clamped signal rule.
pub fn reference_policies(params: &ModelParams) -> Vec<(String, Box<dyn TradingRate>)> {
    vec![
        ("lower".into(), Box::new(ConstantRate(params.rate_lower))),
        ("zero".into(), Box::new(ConstantRate(0.0))),
        ("upper".into(), Box::new(ConstantRate(params.rate_upper))),
        ("signal".into(), Box::new(LinearSignalRate::new(params, 0.0))),
    ]
}

pub fn normalization_checks(params: &ModelParams, paths: usize) -> Vec<CheckResult> {
    let seed = split_seed(params.seed, 1);
    reference_policies(params)
        .iter()
        .map(|(name, policy)| {
            let m = normalization(params, policy.as_ref(), paths, seed);
            CheckResult::at_most(format!("normalization_{name}"), m.z_score(1.0).abs(), 3.0)
        })
        .collect()
}

/// Constant drift 2 in one dimension, then the full model for every
/// reference policy.
pub fn entropy_checks(params: &ModelParams, paths: usize) -> Vec<CheckResult> {
    let seed = split_seed(params.seed, 2);
    let drift = 2.0;
    let target = 0.5 * drift * drift * params.horizon;
    let r = reduced::entropy_report(drift, params.horizon, params.n_steps, paths, seed);
    let mut out = vec![
        CheckResult::at_most("entropy_reduced_lhs", r.lhs.z_score(target).abs(), 3.0),
        CheckResult::at_most("entropy_reduced_rhs", r.rhs.z_score(target).abs(), 3.0),
    ];
    for (name, policy) in reference_policies(params) {
        let r = entropy_report_streaming(params, policy.as_ref(), paths, seed);
        let z = (r.lhs.mean - r.rhs.mean).abs() / r.combined_se().max(f64::MIN_POSITIVE);
        out.push(CheckResult::at_most(format!("entropy_{name}"), z, 3.0));
    }
    out
}

/// Largest z-score of any constraint moment over the test family.
pub fn max_moment_z(params: &ModelParams, policy: &dyn TradingRate, paths: usize, rows: &[usize]) -> f64 {
    let etas = EtaTest::family(params.horizon);
    let moments = constraint_moments_streaming(params, policy, &etas, paths, split_seed(params.seed, 3));
    let mut worst = f64::NEG_INFINITY;
    for m in &moments {
        for &r in rows {
            worst = worst.max(m[r].z_score(0.0));
        }
    }
    worst
}

pub fn moment_checks(params: &ModelParams, paths: usize) -> Vec<CheckResult> {
    let all: Vec<usize> = (0..CONSTRAINT_ROWS).collect();
    let mut out: Vec<CheckResult> = reference_policies(params)
        .iter()
        .map(|(name, policy)| {
            CheckResult::at_most(format!("moments_{name}"), max_moment_z(params, policy.as_ref(), paths, &all), 3.0)
        })
        .collect();
    let over = ConstantRate(params.rate_upper + 1.0);
    out.push(CheckResult::at_least("moments_detect_above_upper", max_moment_z(params, &over, paths, &[4]), 3.0));
    out
}

/// Two equally likely atoms with utilities `(1, -1)` and unit entropy weight.
pub fn gibbs_check(params: &ModelParams) -> Result<CheckResult> {
    let tree = build_tree(1, 2, &[Channel::Inventory], params)?;
    let s = solve_strong_discrete(&tree.probabilities(), &[1.0, -1.0], 1.0, &DiscreteConstraintSet::normalization_only())?;
    Ok(CheckResult::at_most("oracle_gibbs", (s.value - 1.0f64.cosh().ln()).abs(), 1e-8))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleRow {
    pub instance: usize,
    pub atoms: usize,
    pub constraints: usize,
    pub strong: f64,
    pub relaxed: f64,
    pub gap: f64,
    pub counterexamples: usize,
    pub relaxed_spread: f64,
    pub max_violation: f64,
    pub density_error: f64,
}

/// Strong and relaxed values, collapse trials and drift extraction on random
/// trees. Odd instances carry rate constraints.
pub fn oracle_rows(params: &ModelParams, instances: usize, trials: usize) -> Result<Vec<OracleRow>> {
    (0..instances)
        .map(|i| {
            let inst = random_instance(split_seed(params.seed, 1000 + i as u64), params, i % 2 == 1)?;
            let strong = inst.solve_strong()?;
            let relaxed = inst.solve_relaxed(Some(&strong.density))?;
            let collapse = crate::oracle::verify_collapse(
                &inst.tree,
                &inst.utility,
                inst.lambda,
                &inst.constraints,
                trials,
                split_seed(params.seed, 5000 + i as u64),
            )?;
            let dirac = RelaxedControlDiscrete::dirac(&inst.probabilities(), &strong.density);
            let extraction = extract_strong_control(&inst.tree, &dirac, &inst.spec(), &inst.enforced_rows);
            Ok(OracleRow {
                instance: i,
                atoms: inst.tree.atom_count(),
                constraints: inst.constraints.len(),
                strong: strong.value,
                relaxed: relaxed.value,
                gap: (relaxed.value - strong.value).abs(),
                counterexamples: collapse.counterexamples.len(),
                relaxed_spread: collapse.relaxed_spread,
                max_violation: extraction.max_violation,
                density_error: extraction.density_error,
            })
        })
        .collect()
}

pub fn oracle_checks(rows: &[OracleRow]) -> Vec<CheckResult> {
    let max = |f: fn(&OracleRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    vec![
        CheckResult::at_most("oracle_strong_relaxed_gap", max(|r| r.gap), 1e-8),
        CheckResult::at_most("oracle_collapse_counterexamples", max(|r| r.counterexamples as f64), 0.0),
        CheckResult::at_most("oracle_relaxed_spread", max(|r| r.relaxed_spread), crate::oracle::COLLAPSE_TOLERANCE),
        CheckResult::at_most("oracle_extraction_violation", max(|r| r.max_violation), 1e-8),
    ]
}

/// Grid value at a zero fee against a Monte Carlo estimate of the same policy.
pub fn agent_check(params: &ModelParams, paths: usize) -> Result<CheckResult> {
    let zero = Contract::constant(0.0);
    let (policy, grid) = solve_hjb(&zero, params)?;
    let v = grid.origin_value();
    let mc = estimate_agent_value(&zero, &policy, params, paths, split_seed(params.seed, 4));
    let tolerance = (0.01 * v.abs()).max(3.0 * mc.se);
    Ok(CheckResult::at_most("agent_grid_vs_monte_carlo", (mc.mean - v).abs() / tolerance, 1.0))
}

/// Every check in a fixed order.
pub fn run_suite(params: &ModelParams, options: &SuiteOptions) -> Result<(Vec<CheckResult>, Vec<OracleRow>)> {
    let mut checks = normalization_checks(params, options.paths);
    checks.extend(entropy_checks(params, options.paths));
    checks.extend(moment_checks(params, options.paths));
    checks.push(gibbs_check(params)?);
    let rows = oracle_rows(params, options.oracle_instances, options.collapse_trials)?;
    checks.extend(oracle_checks(&rows));
    checks.push(agent_check(params, options.paths)?);
    Ok((checks, rows))
}
