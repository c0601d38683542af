//! Projected coordinate ascent over a coarse `(t, w, z)` rate table.

use crate::contracts::Contract;
use crate::model::ModelParams;
use crate::policy::{FeedbackPolicy, PolicyAxis, StateCoord, TradingRate, UniformAxis};
use crate::rng::split_seed;

use super::{domain_half_widths, estimate_agent_value};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentOptions {
    pub time_nodes: usize,
    pub signal_nodes: usize,
    pub inventory_nodes: usize,
    /// Paths per objective evaluation; the same paths are reused throughout.
    pub paths: usize,
    /// Time steps used while searching.
    pub n_steps: usize,
    pub max_sweeps: usize,
    /// A sweep gaining less than this halves the step.
    pub tolerance: f64,
    /// Initial coordinate step; `min((U - L) / 8, 0.5)` when `None`.
    pub initial_step: Option<f64>,
    /// Search stops once the step falls below `initial_step * min_step_ratio`.
    pub min_step_ratio: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            time_nodes: 4,
            signal_nodes: 5,
            inventory_nodes: 5,
            paths: 1000,
            n_steps: 50,
            max_sweeps: 200,
            tolerance: 1e-6,
            initial_step: None,
            min_step_ratio: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub policy: FeedbackPolicy,
    /// Incumbent value after the seed evaluation and after every sweep.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

pub fn coordinate_ascent(
    contract: &Contract,
    seed_policy: &dyn TradingRate,
    params: &ModelParams,
    options: &AscentOptions,
) -> AscentOutcome {
    let search = ModelParams { n_steps: options.n_steps, ..*params };
    let seed = split_seed(params.seed, 0xa5c3);
    let half = domain_half_widths(params);
    let t = params.horizon;
    let time_nodes: Vec<f64> =
        (0..options.time_nodes).map(|k| t * k as f64 / (options.time_nodes - 1).max(1) as f64).collect();
    let z_half = 3.0 * params.epsilon * t.sqrt() + 0.25 * half[1].min(8.0);
    let axes = vec![
        PolicyAxis { coord: StateCoord::Signal, axis: UniformAxis::symmetric(0.5 * half[0], options.signal_nodes - 1) },
        PolicyAxis { coord: StateCoord::Inventory, axis: UniformAxis::symmetric(z_half, options.inventory_nodes - 1) },
    ];
    let mut policy = FeedbackPolicy::from_rule(
        time_nodes,
        axes,
        params.rate_lower,
        params.rate_upper,
        "coordinate_ascent",
        |s| seed_policy.rate(s),
    );
    let evaluate = |p: &FeedbackPolicy| estimate_agent_value(contract, p, &search, options.paths, seed).mean;

    let mut best = evaluate(&policy);
    let mut trace = vec![best];
    let mut step = options
        .initial_step
        .unwrap_or(((params.rate_upper - params.rate_lower) / 8.0).min(0.5));
    let min_step = step * options.min_step_ratio;
    let mut converged = step <= 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < options.max_sweeps {
        sweeps += 1;
        let start = best;
        for k in 0..policy.len() {
            let current = policy.values()[k];
            for candidate in [current + step, current - step] {
                let clamped = candidate.clamp(params.rate_lower, params.rate_upper);
                if clamped == current {
                    continue;
                }
                policy.values_mut_clamped(k, clamped);
                let value = evaluate(&policy);
                if value > best {
                    best = value;
                    break;
                }
                policy.values_mut_clamped(k, current);
            }
        }
        trace.push(best);
        if best - start < options.tolerance {
            step *= 0.5;
            if step < min_step {
                converged = true;
            }
        }
    }
    AscentOutcome { policy, trace, converged, sweeps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::PathOperator;
    use crate::policy::ConstantRate;

    fn quick() -> AscentOptions {
        AscentOptions {
            time_nodes: 2,
            signal_nodes: 3,
            inventory_nodes: 3,
            paths: 200,
            n_steps: 20,
            max_sweeps: 15,
            ..AscentOptions::default()
        }
    }

    #[test]
    fn trace_is_nondecreasing_and_rates_stay_in_bounds() {
        let p = ModelParams { rate_lower: -1.0, rate_upper: 1.0, ..ModelParams::default() };
        let mut c = Contract::zero_polynomial(1, 2.0, PathOperator::TimeAverage);
        if let Contract::LinearPolynomial { coefficients, .. } = &mut c {
            coefficients[1][1] = 0.5;
        }
        let out = coordinate_ascent(&c, &ConstantRate(0.0), &p, &quick());
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", out.trace);
        assert!(out.trace.last() > out.trace.first());
        assert!(out.policy.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sweep_cap_reports_non_convergence() {
        let p = ModelParams { rate_lower: -1.0, rate_upper: 1.0, ..ModelParams::default() };
        let opts = AscentOptions { max_sweeps: 1, ..quick() };
        let out = coordinate_ascent(&Contract::constant(0.0), &ConstantRate(0.0), &p, &opts);
        assert_eq!(out.sweeps, 1);
        assert!(!out.converged);
    }
}
