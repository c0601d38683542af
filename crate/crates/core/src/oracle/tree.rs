//! Recombination-free scenario trees and the constraint forms built on them.

use serde::{Deserialize, Serialize};

use crate::agent::zeta_integral;
use crate::contracts::Contract;
use crate::error::{Error, Result};
use crate::model::{ConstraintSpec, DiscretizedPath, ModelParams, CONSTRAINT_ROWS};

pub const MAX_ATOMS: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Price,
    Inventory,
    Signal,
}

impl Channel {
    /// Position in the `(P, Z, W)` state vector.
    pub fn slot(self) -> usize {
        match self {
            Channel::Price => 0,
            Channel::Inventory => 1,
            Channel::Signal => 2,
        }
    }

    fn scale(self, params: &ModelParams) -> f64 {
        match self {
            Channel::Price => params.sigma,
            Channel::Inventory => params.epsilon,
            Channel::Signal => 1.0,
        }
    }
}

/// Finite path space: at each of `depth` steps every active channel moves
/// by one of `branching` equally likely increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub depth: usize,
    pub branching: usize,
    pub channels: Vec<Channel>,
    pub horizon: f64,
    pub dt: f64,
    /// `increments[c][k]` is branch `k` of channel `c`.
    pub increments: Vec<Vec<f64>>,
}

/// Builds a tree whose per-step increments have mean zero and variance
/// `scale^2 dt`, with scales `(sigma, epsilon, 1)` for `(P, Z, W)`.
pub fn build_tree(depth: usize, branching: usize, channels: &[Channel], params: &ModelParams) -> Result<ScenarioTree> {
    if depth == 0 {
        return Err(Error::InvalidParams("tree depth must be at least 1".into()));
    }
    if !(branching == 2 || branching == 3) {
        return Err(Error::InvalidParams(format!("branching must be 2 or 3, got {branching}")));
    }
    if channels.is_empty() || channels.len() > 3 {
        return Err(Error::InvalidParams("between 1 and 3 channels are required".into()));
    }
    for (i, c) in channels.iter().enumerate() {
        if channels[..i].contains(c) {
            return Err(Error::InvalidParams(format!("channel {c:?} listed twice")));
        }
    }
    let exponent = (channels.len() * depth) as u32;
    let atoms = (branching as u64).checked_pow(exponent).unwrap_or(u64::MAX);
    if atoms > MAX_ATOMS {
        return Err(Error::TreeTooLarge { atoms, limit: MAX_ATOMS });
    }
    let dt = params.horizon / depth as f64;
    let increments = channels
        .iter()
        .map(|c| {
            let scale = c.scale(params);
            if branching == 2 {
                let s = scale * dt.sqrt();
                vec![-s, s]
            } else {
                let s = scale * (1.5 * dt).sqrt();
                vec![-s, 0.0, s]
            }
        })
        .collect();
    Ok(ScenarioTree { depth, branching, channels: channels.to_vec(), horizon: params.horizon, dt, increments })
}

impl ScenarioTree {
    /// Joint outcomes per step, `branching^channels`.
    pub fn step_outcomes(&self) -> usize {
        self.branching.pow(self.channels.len() as u32)
    }

    pub fn atom_count(&self) -> usize {
        self.step_outcomes().pow(self.depth as u32)
    }

    pub fn probability(&self, _atom: usize) -> f64 {
        1.0 / self.atom_count() as f64
    }

    pub fn probabilities(&self) -> Vec<f64> {
        vec![1.0 / self.atom_count() as f64; self.atom_count()]
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        self.step_outcomes().pow(level as u32)
    }

    /// Index of the level-`level` ancestor of `atom`.
    pub fn node_of(&self, atom: usize, level: usize) -> usize {
        atom / self.step_outcomes().pow((self.depth - level) as u32)
    }

    /// Base probability of a level-`level` node.
    pub fn node_probability(&self, level: usize) -> f64 {
        1.0 / self.nodes_at(level) as f64
    }

    /// Joint outcome of step `k` (from `t_k` to `t_{k+1}`) along `atom`.
    pub fn outcome(&self, atom: usize, k: usize) -> usize {
        (atom / self.step_outcomes().pow((self.depth - 1 - k) as u32)) % self.step_outcomes()
    }

    /// `(dP, dZ, dW)` of step `k` along `atom`.
    pub fn increment(&self, atom: usize, k: usize) -> [f64; 3] {
        let mut o = self.outcome(atom, k);
        let mut out = [0.0; 3];
        for (c, channel) in self.channels.iter().enumerate() {
            out[channel.slot()] = self.increments[c][o % self.branching];
            o /= self.branching;
        }
        out
    }

    pub fn path(&self, atom: usize) -> DiscretizedPath {
        let mut path = DiscretizedPath::zeros(self.horizon, self.depth);
        for k in 0..self.depth {
            let d = self.increment(atom, k);
            path.p[k + 1] = path.p[k] + d[0];
            path.z[k + 1] = path.z[k] + d[1];
            path.w[k + 1] = path.w[k] + d[2];
        }
        path
    }
}

/// Atom utility `zeta - xi` of the agent's reweighted objective.
pub fn atom_utility(tree: &ScenarioTree, contract: &Contract, params: &ModelParams) -> Vec<f64> {
    (0..tree.atom_count())
        .map(|x| {
            let path = tree.path(x);
            zeta_integral(&path, params) - contract.evaluate(&path)
        })
        .collect()
}

/// One linear form `c(x) = 1{x passes node} (Y_{k+1} - Y_k)_row / (p(node) dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintForm {
    pub level: usize,
    pub node: usize,
    pub row: usize,
    pub values: Vec<f64>,
}

/// Adapted linear constraints `sum_x p(x) m(x) c(x) <= 0` on the density.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiscreteConstraintSet {
    pub forms: Vec<ConstraintForm>,
}

impl DiscreteConstraintSet {
    /// No constraint beyond normalization.
    pub fn normalization_only() -> Self {
        Self::default()
    }

    /// Node-indicator forms for the given rows (0-based) of `b dt + A dX`.
    /// Forms that vanish identically are dropped.
    pub fn from_rows(tree: &ScenarioTree, spec: &ConstraintSpec, rows: &[usize]) -> Self {
        let mut forms = Vec::new();
        for level in 0..tree.depth {
            let scale = 1.0 / (tree.node_probability(level) * tree.dt);
            for node in 0..tree.nodes_at(level) {
                for &row in rows {
                    assert!(row < CONSTRAINT_ROWS);
                    let values: Vec<f64> = (0..tree.atom_count())
                        .map(|x| {
                            if tree.node_of(x, level) != node {
                                return 0.0;
                            }
                            let w = tree.path(x).w[level];
                            spec.accumulator_increment(w, tree.dt, tree.increment(x, level))[row] * scale
                        })
                        .collect();
                    if values.iter().any(|v| *v != 0.0) {
                        forms.push(ConstraintForm { level, node, row, values });
                    }
                }
            }
        }
        Self { forms }
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    /// Each form is supported on a single level-`level` node, so its test
    /// function is known at that node's time.
    pub fn is_adapted(&self, tree: &ScenarioTree) -> bool {
        self.forms.iter().all(|f| {
            f.values.iter().enumerate().all(|(x, v)| *v == 0.0 || tree.node_of(x, f.level) == f.node)
        })
    }

    /// `sum_x p(x) m(x) c_r(x)` for every form.
    pub fn evaluate(&self, probabilities: &[f64], density: &[f64]) -> Vec<f64> {
        self.forms
            .iter()
            .map(|f| f.values.iter().zip(probabilities).zip(density).map(|((c, p), m)| c * p * m).sum())
            .collect()
    }

    /// `sum_r (max |c_r|)^2`.
    pub fn squared_sup_norm(&self) -> f64 {
        self.forms.iter().map(|f| f.values.iter().fold(0.0f64, |a, v| a.max(v.abs())).powi(2)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams { sigma: 1.0, epsilon: 0.5, horizon: 1.0, ..ModelParams::default() }
    }

    #[test]
    fn atom_counts_and_probabilities() {
        let p = params();
        let t = build_tree(1, 2, &[Channel::Inventory], &p).unwrap();
        assert_eq!(t.atom_count(), 2);
        assert_eq!(t.probabilities(), vec![0.5, 0.5]);
        let t = build_tree(2, 2, &[Channel::Inventory], &p).unwrap();
        assert_eq!(t.atom_count(), 4);
        let t = build_tree(2, 3, &[Channel::Price, Channel::Signal], &p).unwrap();
        assert_eq!(t.atom_count(), 81);
        assert!((t.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn oversized_trees_are_rejected() {
        let p = params();
        let all = [Channel::Price, Channel::Inventory, Channel::Signal];
        match build_tree(4, 3, &all, &p) {
            Err(Error::TreeTooLarge { atoms, limit }) => {
                assert_eq!(atoms, 3u64.pow(12));
                assert_eq!(limit, MAX_ATOMS);
            }
            other => panic!("{other:?}"),
        }
        assert!(build_tree(2, 4, &all, &p).is_err());
    }

    #[test]
    fn increments_match_channel_variance() {
        let p = params();
        for b in [2, 3] {
            let t = build_tree(4, b, &[Channel::Inventory], &p).unwrap();
            let inc = &t.increments[0];
            let mean: f64 = inc.iter().sum::<f64>() / b as f64;
            let var: f64 = inc.iter().map(|x| x * x).sum::<f64>() / b as f64;
            assert!(mean.abs() < 1e-15);
            assert!((var - 0.25 * t.dt).abs() < 1e-15, "{var}");
        }
    }

    #[test]
    fn node_structure_is_consistent() {
        let p = params();
        let t = build_tree(3, 2, &[Channel::Inventory, Channel::Signal], &p).unwrap();
        for x in 0..t.atom_count() {
            assert_eq!(t.node_of(x, 0), 0);
            assert_eq!(t.node_of(x, t.depth), x);
            for k in 0..t.depth {
                assert_eq!(t.node_of(x, k + 1), t.node_of(x, k) * t.step_outcomes() + t.outcome(x, k));
            }
            assert_eq!(t.path(x).p, vec![0.0; 4]);
        }
    }

    #[test]
    fn forms_are_adapted_and_vanish_at_unit_density_for_signal_rows() {
        let p = params();
        let t = build_tree(2, 2, &[Channel::Inventory, Channel::Signal], &p).unwrap();
        let set = DiscreteConstraintSet::from_rows(&t, &ConstraintSpec::with_bounds(-1.0, 1.0), &[2, 3, 4, 5]);
        assert!(set.is_adapted(&t));
        assert_eq!(set.len(), (1 + 4) * 4);
        let ones = vec![1.0; t.atom_count()];
        for (f, v) in set.forms.iter().zip(set.evaluate(&t.probabilities(), &ones)) {
            match f.row {
                2 | 3 => assert!(v.abs() < 1e-12),
                _ => assert!((v + 1.0).abs() < 1e-12, "{v}"),
            }
        }
    }
}
