//! Agent side: pathwise objective, value estimation and best response.

mod ascent;
mod hjb;

pub use ascent::{coordinate_ascent, AscentOptions, AscentOutcome};
pub use hjb::{domain_half_widths, is_markovian, solve_hjb, solve_hjb_with, HjbOptions, ValueGrid};

use serde::{Deserialize, Serialize};

use crate::contracts::{Contract, PathOperator};
use crate::error::Result;
use crate::girsanov::{map_controlled_paths, map_weighted_reference};
use crate::model::{DiscretizedPath, ModelParams, PathWeight};
use crate::policy::{FeedbackPolicy, TradingRate};
use crate::stats::{pairwise_sum, Estimate};

/// Agent reward `-xi + int Z W dt - phi_a int pi^2 dt` and its reweighted
/// form `-M xi - 2 eps^2 phi_a M log M + M zeta` over reference paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentUtilitySpec {
    pub sigma: f64,
    pub epsilon: f64,
    pub phi_a: f64,
}

impl AgentUtilitySpec {
    pub fn from_params(params: &ModelParams) -> Self {
        Self { sigma: params.sigma, epsilon: params.epsilon, phi_a: params.phi_a }
    }

    /// `2 eps^2 phi_a`.
    pub fn entropy_weight(&self) -> f64 {
        2.0 * self.epsilon * self.epsilon * self.phi_a
    }

    /// `rates[i]` is the rate on `[t_i, t_{i+1})`.
    pub fn pathwise_objective(&self, fee: f64, path: &DiscretizedPath, rates: &[f64]) -> f64 {
        let dt = path.dt();
        let n = path.n_steps();
        let signal: Vec<f64> = (0..n).map(|i| path.z[i] * path.w[i]).collect();
        let cost: Vec<f64> = rates.iter().map(|r| r * r).collect();
        -fee + pairwise_sum(&signal) * dt - self.phi_a * pairwise_sum(&cost) * dt
    }

    pub fn zeta(&self, path: &DiscretizedPath) -> f64 {
        let c = self.epsilon * self.epsilon * self.phi_a / (self.sigma * self.sigma);
        let dt = path.dt();
        let terms: Vec<f64> = (0..path.n_steps()).map(|i| c * path.w[i] * path.w[i] + path.z[i] * path.w[i]).collect();
        pairwise_sum(&terms) * dt
    }

    /// `U_a(xi, X, M)` on a reference path.
    pub fn reweighted_objective(&self, fee: f64, path: &DiscretizedPath, weight: &PathWeight) -> f64 {
        weight.m * (-fee - self.entropy_weight() * weight.log_m + self.zeta(path))
    }
}

/// `int (eps^2 phi_a / sigma^2 W^2 + Z W) dt`, left-point.
pub fn zeta_integral(path: &DiscretizedPath, params: &ModelParams) -> f64 {
    AgentUtilitySpec::from_params(params).zeta(path)
}

/// Monte Carlo estimate of the agent's expected reward under `policy`.
/// The same `seed` gives common random numbers across policies and fees.
pub fn estimate_agent_value(
    contract: &Contract,
    policy: &dyn TradingRate,
    params: &ModelParams,
    count: usize,
    seed: u64,
) -> Estimate {
    let spec = AgentUtilitySpec::from_params(params);
    let samples = map_controlled_paths(params, policy, count, seed, |cp| {
        spec.pathwise_objective(contract.evaluate(&cp.path), &cp.path, &cp.rates)
    });
    Estimate::from_samples(&samples)
}

/// Same expectation computed as `E[U_a(xi, X, M)]` over reference paths.
pub fn reweighted_agent_value(
    contract: &Contract,
    policy: &dyn TradingRate,
    params: &ModelParams,
    count: usize,
    seed: u64,
) -> Estimate {
    let spec = AgentUtilitySpec::from_params(params);
    let samples = map_weighted_reference(params, policy, count, seed, |path, w| {
        spec.reweighted_objective(contract.evaluate(path), path, w)
    });
    Estimate::from_samples(&samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMethod {
    Hjb,
    CoordinateAscent,
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub policy: FeedbackPolicy,
    /// Exact grid value for HJB responses; Monte Carlo estimate otherwise.
    pub value: Estimate,
    pub method: ResponseMethod,
    /// `false` when coordinate ascent hit its sweep cap while still improving.
    pub converged: bool,
    /// Incumbent value after each ascent sweep (empty for HJB responses).
    pub trace: Vec<f64>,
    pub grid: Option<ValueGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentOptions {
    pub hjb: HjbOptions,
    pub ascent: AscentOptions,
}

pub fn best_response(contract: &Contract, params: &ModelParams) -> Result<BestResponse> {
    best_response_with(contract, params, &AgentOptions::default())
}

/// HJB for Markovian fees, otherwise projected coordinate ascent seeded by
/// the HJB policy of the nearest Markovian fee.
pub fn best_response_with(contract: &Contract, params: &ModelParams, options: &AgentOptions) -> Result<BestResponse> {
    if is_markovian(contract, params) {
        let (policy, grid) = solve_hjb_with(contract, params, &options.hjb)?;
        return Ok(BestResponse {
            policy,
            value: Estimate::exact(grid.origin_value()),
            method: ResponseMethod::Hjb,
            converged: true,
            trace: Vec::new(),
            grid: Some(grid),
        });
    }
    let proxy = markovian_proxy(contract);
    let (seed_policy, _) = solve_hjb_with(&proxy, params, &options.hjb)?;
    let outcome = coordinate_ascent(contract, &seed_policy, params, &options.ascent);
    let value = estimate_agent_value(contract, &outcome.policy, params, params.n_paths, params.seed);
    Ok(BestResponse {
        policy: outcome.policy,
        value,
        method: ResponseMethod::CoordinateAscent,
        converged: outcome.converged,
        trace: outcome.trace,
        grid: None,
    })
}

/// Nearest fee the HJB solver accepts: averages become terminal values and
/// tables become their mean node value.
pub fn markovian_proxy(contract: &Contract) -> Contract {
    match contract {
        Contract::LinearPolynomial { degree, cap, coefficients, .. } => Contract::LinearPolynomial {
            degree: *degree,
            cap: *cap,
            operator: PathOperator::Terminal,
            coefficients: coefficients.clone(),
        },
        Contract::LipschitzTable(t) => Contract::constant(pairwise_sum(&t.values) / t.values.len() as f64),
        Contract::Constant { .. } => contract.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::girsanov::controlled_path;
    use crate::policy::{ConstantRate, LinearSignalRate};

    #[test]
    fn zeta_examples() {
        let p = ModelParams { sigma: 1.0, epsilon: 1.0, phi_a: 0.5, n_steps: 10, ..ModelParams::default() };
        let mut path = DiscretizedPath::zeros(1.0, 10);
        path.z.fill(3.0);
        assert_eq!(zeta_integral(&path, &p), 0.0);
        path.w.fill(1.0);
        path.z.fill(1.0);
        assert!((zeta_integral(&path, &p) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn pathwise_objective_matches_direct_sum() {
        let p = ModelParams { n_steps: 40, ..ModelParams::default() };
        let spec = AgentUtilitySpec::from_params(&p);
        let policy = LinearSignalRate::new(&p, 0.1);
        let cp = controlled_path(&p, &policy, 4, 2);
        let dt = p.dt();
        let mut direct = -0.25;
        for i in 0..40 {
            direct += cp.path.z[i] * cp.path.w[i] * dt - p.phi_a * cp.rates[i] * cp.rates[i] * dt;
        }
        let got = spec.pathwise_objective(0.25, &cp.path, &cp.rates);
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn idle_agent_with_no_fee_earns_nothing() {
        let p = ModelParams { n_steps: 50, ..ModelParams::default() };
        let est = estimate_agent_value(&Contract::constant(0.0), &ConstantRate(0.0), &p, 4000, 5);
        assert!(est.within(0.0, 3.0), "{est:?}");
    }

    #[test]
    fn markovian_contracts_dispatch_to_hjb() {
        let p = ModelParams { rate_lower: -1.0, rate_upper: 1.0, ..ModelParams::default() };
        let opts = AgentOptions {
            hjb: HjbOptions { intervals_2d: [40, 40], ..HjbOptions::default() },
            ..AgentOptions::default()
        };
        let c = Contract::constant(0.1);
        let br = best_response_with(&c, &p, &opts).unwrap();
        let (policy, grid) = solve_hjb_with(&c, &p, &opts.hjb).unwrap();
        assert_eq!(br.method, ResponseMethod::Hjb);
        assert_eq!(br.policy, policy);
        assert_eq!(br.value.mean, grid.origin_value());
        assert_eq!(br.value.se, 0.0);
    }

    #[test]
    fn proxy_of_average_is_terminal() {
        let c = Contract::zero_polynomial(1, 2.0, PathOperator::TimeAverage);
        match markovian_proxy(&c) {
            Contract::LinearPolynomial { operator, .. } => assert_eq!(operator, PathOperator::Terminal),
            other => panic!("{other:?}"),
        }
    }
}
