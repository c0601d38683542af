//! Finite scenario-tree analogue of the relaxed agent problem: strong and
//! randomized density optimization, collapse checks and drift extraction.

mod relaxed;
mod strong;
mod tree;

pub use relaxed::{
    density_grid, dirac_objective, extract_strong_control, log_spaced, solve_relaxed_discrete, verify_collapse,
    CollapseCounterexample, CollapseReport, ControlChecks, ExtractionReport, NodeDrift, RelaxedControlDiscrete,
    RelaxedSolution, COLLAPSE_TOLERANCE, LP_ROW_SLACK,
};
pub use strong::{solve_strong_discrete, solve_strong_discrete_with, strong_objective, DualAscentOptions, StrongSolution};
pub use tree::{atom_utility, build_tree, Channel, ConstraintForm, DiscreteConstraintSet, ScenarioTree, MAX_ATOMS};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ConstraintSpec, ModelParams};
use crate::rng::task_rng;

/// A complete oracle problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInstance {
    pub tree: ScenarioTree,
    pub utility: Vec<f64>,
    pub lambda: f64,
    pub rate_bounds: (f64, f64),
    /// Rows of `b dt + A dX` (0-based) turned into constraints.
    pub enforced_rows: Vec<usize>,
    pub constraints: DiscreteConstraintSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AtomRecord {
    index: usize,
    probability: f64,
    /// `(P, Z, W)` at every tree time.
    path: Vec<[f64; 3]>,
    utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    tree: ScenarioTree,
    lambda: f64,
    rate_bounds: (f64, f64),
    enforced_rows: Vec<usize>,
    atoms: Vec<AtomRecord>,
    constraints: Vec<ConstraintForm>,
    solution: Option<Vec<f64>>,
}

impl OracleInstance {
    pub fn new(
        tree: ScenarioTree,
        utility: Vec<f64>,
        lambda: f64,
        rate_bounds: (f64, f64),
        enforced_rows: Vec<usize>,
    ) -> Self {
        let spec = ConstraintSpec::with_bounds(rate_bounds.0, rate_bounds.1);
        let constraints = DiscreteConstraintSet::from_rows(&tree, &spec, &enforced_rows);
        Self { tree, utility, lambda, rate_bounds, enforced_rows, constraints }
    }

    pub fn spec(&self) -> ConstraintSpec {
        ConstraintSpec::with_bounds(self.rate_bounds.0, self.rate_bounds.1)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.tree.probabilities()
    }

    pub fn solve_strong(&self) -> Result<StrongSolution> {
        solve_strong_discrete(&self.probabilities(), &self.utility, self.lambda, &self.constraints)
    }

    /// Randomized problem on the default grid augmented with `extra`.
    pub fn solve_relaxed(&self, extra: Option<&[f64]>) -> Result<RelaxedSolution> {
        let grid = density_grid(self.tree.atom_count(), extra);
        solve_relaxed_discrete(&self.tree, &self.utility, self.lambda, &self.constraints, &grid)
    }

    /// JSON record with an atom table, the constraint list and an optional
    /// density vector.
    pub fn to_record(&self, solution: Option<&[f64]>) -> String {
        let probabilities = self.probabilities();
        let atoms = (0..self.tree.atom_count())
            .map(|x| {
                let path = self.tree.path(x);
                AtomRecord {
                    index: x,
                    probability: probabilities[x],
                    path: (0..path.times.len()).map(|k| [path.p[k], path.z[k], path.w[k]]).collect(),
                    utility: self.utility[x],
                }
            })
            .collect();
        let record = InstanceRecord {
            tree: self.tree.clone(),
            lambda: self.lambda,
            rate_bounds: self.rate_bounds,
            enforced_rows: self.enforced_rows.clone(),
            atoms,
            constraints: self.constraints.forms.clone(),
            solution: solution.map(|s| s.to_vec()),
        };
        serde_json::to_string_pretty(&record).expect("instance serializes")
    }

    /// Parses a record written by [`OracleInstance::to_record`].
    pub fn from_record(text: &str) -> Result<(Self, Option<Vec<f64>>)> {
        let r: InstanceRecord = serde_json::from_str(text)?;
        let utility = r.atoms.iter().map(|a| a.utility).collect();
        let instance = Self {
            tree: r.tree,
            utility,
            lambda: r.lambda,
            rate_bounds: r.rate_bounds,
            enforced_rows: r.enforced_rows,
            constraints: DiscreteConstraintSet { forms: r.constraints },
        };
        Ok((instance, r.solution))
    }
}

/// Rows that can be enforced on a tree with the given channels: the signal
/// rows need `W`, the price rows need both `P` and `W`, the rate rows need `Z`.
pub fn admissible_rows(channels: &[Channel]) -> Vec<usize> {
    let has = |c| channels.contains(&c);
    let mut rows = Vec::new();
    if has(Channel::Price) && has(Channel::Signal) {
        rows.extend([0, 1]);
    }
    if has(Channel::Signal) {
        rows.extend([2, 3]);
    }
    if has(Channel::Inventory) {
        rows.extend([4, 5]);
    }
    rows
}

/// Random instance on a binary tree of depth 1 or 2 with uniform utilities.
/// Constrained instances always carry an inventory channel and enforce every
/// admissible row, with rate bounds tight enough to bind.
pub fn random_instance(seed: u64, params: &ModelParams, constrained: bool) -> Result<OracleInstance> {
    let mut rng = task_rng(seed, 0);
    let choices: &[&[Channel]] = if constrained {
        &[
            &[Channel::Inventory],
            &[Channel::Inventory, Channel::Signal],
            &[Channel::Price, Channel::Inventory, Channel::Signal],
        ]
    } else {
        &[
            &[Channel::Inventory],
            &[Channel::Signal],
            &[Channel::Inventory, Channel::Signal],
            &[Channel::Price, Channel::Signal],
        ]
    };
    let channels = *choices.choose(&mut rng).expect("nonempty");
    let depth = rng.random_range(1..=2);
    let tree = build_tree(depth, 2, channels, params)?;
    let scale: f64 = rng.random_range(0.5..2.0);
    let utility = (0..tree.atom_count()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    let lambda = rng.random_range(0.5..2.0);
    let (bounds, rows) = if constrained {
        ((rng.random_range(-0.4..-0.05), rng.random_range(0.05..0.4)), admissible_rows(channels))
    } else {
        ((params.rate_lower, params.rate_upper), Vec::new())
    };
    Ok(OracleInstance::new(tree, utility, lambda, bounds, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let params = ModelParams::default();
        let inst = random_instance(4, &params, true).unwrap();
        let sol = inst.solve_strong().unwrap();
        let text = inst.to_record(Some(&sol.density));
        let (back, density) = OracleInstance::from_record(&text).unwrap();
        assert_eq!(back, inst);
        assert_eq!(density.unwrap(), sol.density);
    }

    #[test]
    fn random_constrained_instances_are_solvable() {
        let params = ModelParams::default();
        for seed in 0..20 {
            let inst = random_instance(seed, &params, true).unwrap();
            assert!(inst.constraints.is_adapted(&inst.tree));
            let sol = inst.solve_strong().unwrap();
            let g = inst.constraints.evaluate(&inst.probabilities(), &sol.density);
            assert!(g.iter().all(|v| *v <= 1e-9), "seed {seed}: {g:?}");
        }
    }
}
