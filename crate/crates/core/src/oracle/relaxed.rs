//! Randomized densities on a finite grid, the collapse check and the
//! extraction of a per-node drift from a density.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConstraintSpec, CONSTRAINT_ROWS};
use crate::rng::task_rng;

use super::strong::{entropy_term, solve_strong_discrete, strong_objective};
use super::tree::{DiscreteConstraintSet, ScenarioTree};

/// Slack allowed on the constraint rows of the linear program, so that a
/// density meeting the rows to dual-ascent tolerance stays feasible.
pub const LP_ROW_SLACK: f64 = 1e-9;
/// Largest conditional mean absolute deviation still counted as Dirac.
pub const COLLAPSE_TOLERANCE: f64 = 1e-6;

/// `count` log-spaced values from `lo` to `hi`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect()
}

/// Default per-atom density grid: 21 log-spaced points on `[1e-3, 1e3]`,
/// plus `extra[x]` at atom `x` when given.
pub fn density_grid(atoms: usize, extra: Option<&[f64]>) -> Vec<Vec<f64>> {
    let base = log_spaced(1e-3, 1e3, 21);
    (0..atoms)
        .map(|x| {
            let mut g = base.clone();
            if let Some(e) = extra {
                g.push(e[x]);
            }
            g.sort_by(|a, b| a.total_cmp(b));
            g.dedup();
            g
        })
        .collect()
}

/// A distribution over `(path atom, density)` pairs with path marginal `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedControlDiscrete {
    pub probabilities: Vec<f64>,
    /// Per path atom: `(density, conditional weight)` pairs, weights summing to one.
    pub atoms: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlChecks {
    /// `|sum_x p(x) E[m | x] - 1|`.
    pub normalization_error: f64,
    pub min_density: f64,
    /// Largest `|sum_j q_j(x) - 1|`.
    pub marginal_error: f64,
    /// `sum_x p(x) E[m log m | x]`.
    pub entropy: f64,
}

impl RelaxedControlDiscrete {
    pub fn dirac(probabilities: &[f64], density: &[f64]) -> Self {
        Self { probabilities: probabilities.to_vec(), atoms: density.iter().map(|m| vec![(*m, 1.0)]).collect() }
    }

    pub fn conditional_mean(&self, x: usize) -> f64 {
        self.atoms[x].iter().map(|(m, q)| m * q).sum()
    }

    pub fn conditional_means(&self) -> Vec<f64> {
        (0..self.atoms.len()).map(|x| self.conditional_mean(x)).collect()
    }

    /// Largest `E[|m - E[m|x]| | x]` over path atoms.
    pub fn spread(&self) -> f64 {
        (0..self.atoms.len())
            .map(|x| {
                let mean = self.conditional_mean(x);
                self.atoms[x].iter().map(|(m, q)| q * (m - mean).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_dirac(&self, tolerance: f64) -> bool {
        self.spread() <= tolerance
    }

    /// `sum_x p(x) E[m u(x) - lambda m log m | x]`.
    pub fn objective(&self, u: &[f64], lambda: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.probabilities)
            .zip(u)
            .map(|((atom, p), ux)| p * atom.iter().map(|(m, q)| q * (m * ux - lambda * entropy_term(*m))).sum::<f64>())
            .sum()
    }

    pub fn checks(&self) -> ControlChecks {
        let means = self.conditional_means();
        let total: f64 = means.iter().zip(&self.probabilities).map(|(m, p)| m * p).sum();
        let min_density = self.atoms.iter().flatten().filter(|(_, q)| *q > 0.0).map(|(m, _)| *m).fold(f64::INFINITY, f64::min);
        let marginal_error = self
            .atoms
            .iter()
            .map(|a| (a.iter().map(|(_, q)| q).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        let entropy = self
            .atoms
            .iter()
            .zip(&self.probabilities)
            .map(|(a, p)| p * a.iter().map(|(m, q)| q * entropy_term(*m)).sum::<f64>())
            .sum();
        ControlChecks { normalization_error: (total - 1.0).abs(), min_density, marginal_error, entropy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedSolution {
    pub value: f64,
    pub control: RelaxedControlDiscrete,
}

/// Linear program over the joint masses `q(x, j)` of path atom `x` and grid
/// density `m_j`: the objective and all constraints are linear in `q`.
pub fn solve_relaxed_discrete(
    tree: &ScenarioTree,
    u: &[f64],
    lambda: f64,
    constraints: &DiscreteConstraintSet,
    grid: &[Vec<f64>],
) -> Result<RelaxedSolution> {
    let p = tree.probabilities();
    if u.len() != p.len() || grid.len() != p.len() {
        return Err(Error::InvalidParams("utility and grid must have one entry per atom".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParams("entropy weight must be positive".into()));
    }
    if grid.iter().flatten().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidParams("density grid must be strictly positive".into()));
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<Vec<_>> = grid
        .iter()
        .zip(u)
        .map(|(g, ux)| g.iter().map(|m| lp.add_var(m * ux - lambda * entropy_term(*m), (0.0, f64::INFINITY))).collect())
        .collect();
    for (x, row) in vars.iter().enumerate() {
        let terms: Vec<_> = row.iter().map(|v| (*v, 1.0)).collect();
        lp.add_constraint(terms.as_slice(), ComparisonOp::Eq, p[x]);
    }
    let norm: Vec<_> = vars
        .iter()
        .zip(grid)
        .flat_map(|(row, g)| row.iter().zip(g).map(|(v, m)| (*v, *m)))
        .collect();
    lp.add_constraint(norm.as_slice(), ComparisonOp::Eq, 1.0);
    for form in &constraints.forms {
        let terms: Vec<_> = vars
            .iter()
            .zip(grid)
            .zip(&form.values)
            .filter(|(_, c)| **c != 0.0)
            .flat_map(|((row, g), c)| row.iter().zip(g).map(move |(v, m)| (*v, m * c)))
            .collect();
        lp.add_constraint(terms.as_slice(), ComparisonOp::Le, LP_ROW_SLACK);
    }
    let solution = match lp.solve() {
        Ok(outcome) => outcome.into_solution().map_err(|e| Error::Lp(format!("{e:?}")))?,
        Err(microlp::Error::Infeasible) => {
            return Err(Error::Infeasible("no randomized density on the grid meets the constraints".into()))
        }
        Err(e) => return Err(Error::Lp(e.to_string())),
    };
    let atoms = vars
        .iter()
        .zip(grid)
        .zip(&p)
        .map(|((row, g), px)| {
            let mut weights: Vec<f64> = row.iter().map(|v| (solution.var_value(*v) / px).max(0.0)).collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            g.iter().cloned().zip(weights).filter(|(_, q)| *q > 0.0).collect()
        })
        .collect();
    let control = RelaxedControlDiscrete { probabilities: p, atoms };
    Ok(RelaxedSolution { value: control.objective(u, lambda), control })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseCounterexample {
    pub trial: usize,
    pub randomized_atoms: Vec<usize>,
    pub randomized_objective: f64,
    pub dirac_objective: f64,
    pub jensen_gap: f64,
    pub control: RelaxedControlDiscrete,
    pub utility: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseReport {
    pub trials: usize,
    pub degenerate_trials: usize,
    pub counterexamples: Vec<CollapseCounterexample>,
    /// Smallest `(Dirac - randomized) / (lambda * gap)` over non-degenerate trials.
    pub min_gap_ratio: f64,
    pub relaxed_spread: f64,
    pub relaxed_is_dirac: bool,
}

impl CollapseReport {
    pub fn passed(&self) -> bool {
        self.counterexamples.is_empty() && self.relaxed_is_dirac
    }
}

/// Splits the optimal density at random atoms into two-point laws with the
/// same conditional mean and checks that the objective drops by exactly the
/// entropy Jensen gap; also checks that the grid LP returns a Dirac control.
pub fn verify_collapse(
    tree: &ScenarioTree,
    u: &[f64],
    lambda: f64,
    constraints: &DiscreteConstraintSet,
    trials: usize,
    seed: u64,
) -> Result<CollapseReport> {
    let p = tree.probabilities();
    let strong = solve_strong_discrete(&p, u, lambda, constraints)?;
    let dirac = RelaxedControlDiscrete::dirac(&p, &strong.density);
    let dirac_objective = dirac.objective(u, lambda);
    let scale = 1.0 + dirac_objective.abs();
    let mut rng = task_rng(seed, 0);
    let mut counterexamples = Vec::new();
    let mut degenerate_trials = 0;
    let mut min_gap_ratio = f64::INFINITY;
    for trial in 0..trials {
        let degenerate = rng.random_bool(0.1);
        let mut control = dirac.clone();
        let mut chosen = Vec::new();
        let mut gap = 0.0;
        for x in 0..p.len() {
            if !(rng.random_bool(0.5) || (x + 1 == p.len() && chosen.is_empty())) {
                continue;
            }
            chosen.push(x);
            let mean = strong.density[x];
            let theta: f64 = rng.random_range(0.05..0.95);
            let r: f64 = if degenerate { 0.0 } else { rng.random_range(0.01..0.9) };
            let m1 = mean * (1.0 - r);
            let m2 = mean * (1.0 + theta * r / (1.0 - theta));
            control.atoms[x] = vec![(m1, theta), (m2, 1.0 - theta)];
            gap += p[x] * (theta * entropy_term(m1) + (1.0 - theta) * entropy_term(m2) - entropy_term(mean));
        }
        if degenerate {
            degenerate_trials += 1;
        }
        let randomized_objective = control.objective(u, lambda);
        let drop = dirac_objective - randomized_objective;
        let expected = lambda * gap;
        let tol = 1e-12 * scale;
        let bad = if degenerate {
            drop.abs() > tol
        } else {
            min_gap_ratio = min_gap_ratio.min(drop / expected);
            !(drop > 0.0) || drop < expected - tol || (drop - expected).abs() > 1e-9 * scale
        };
        if bad {
            counterexamples.push(CollapseCounterexample {
                trial,
                randomized_atoms: chosen,
                randomized_objective,
                dirac_objective,
                jensen_gap: gap,
                control,
                utility: u.to_vec(),
                lambda,
            });
        }
    }
    let grid = density_grid(p.len(), Some(&strong.density));
    let relaxed = solve_relaxed_discrete(tree, u, lambda, constraints, &grid)?;
    let relaxed_spread = relaxed.control.spread();
    Ok(CollapseReport {
        trials,
        degenerate_trials,
        counterexamples,
        min_gap_ratio,
        relaxed_spread,
        relaxed_is_dirac: relaxed_spread <= COLLAPSE_TOLERANCE,
    })
}

/// Drift and constraint residuals at one tree node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeDrift {
    pub level: usize,
    pub node: usize,
    pub signal: f64,
    /// `E^Q[dX | node] / dt` for `(P, Z, W)`.
    pub drift: [f64; 3],
    /// `b(W) + A nu` at the node.
    pub residual: [f64; CONSTRAINT_ROWS],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionReport {
    pub nodes: Vec<NodeDrift>,
    /// Largest `|prod of transition ratios - E[m | x]|` over atoms.
    pub density_error: f64,
    /// Largest positive residual over the enforced rows.
    pub max_violation: f64,
}

/// Reads the conditional mean density as a change of measure on the tree,
/// extracts the one-step drift at every node and evaluates the constraint
/// rows there.
pub fn extract_strong_control(
    tree: &ScenarioTree,
    control: &RelaxedControlDiscrete,
    spec: &ConstraintSpec,
    enforced_rows: &[usize],
) -> ExtractionReport {
    let mbar = control.conditional_means();
    let q: Vec<f64> = mbar.iter().zip(&control.probabilities).map(|(m, p)| m * p).collect();
    let depth = tree.depth;
    // Q-mass of every node at every level.
    let mut mass: Vec<Vec<f64>> = (0..=depth).map(|k| vec![0.0; tree.nodes_at(k)]).collect();
    for (x, qx) in q.iter().enumerate() {
        for (k, level) in mass.iter_mut().enumerate() {
            level[tree.node_of(x, k)] += qx;
        }
    }
    let mut nodes = Vec::new();
    let mut max_violation: f64 = 0.0;
    for k in 0..depth {
        for n in 0..tree.nodes_at(k) {
            let mut moment = [0.0; 3];
            let mut representative = None;
            for (x, qx) in q.iter().enumerate() {
                if tree.node_of(x, k) != n {
                    continue;
                }
                let d = tree.increment(x, k);
                for i in 0..3 {
                    moment[i] += qx * d[i];
                }
                representative.get_or_insert(x);
            }
            let x0 = representative.expect("every node has atoms");
            let signal = tree.path(x0).w[k];
            let drift = moment.map(|m| m / (mass[k][n] * tree.dt));
            let residual = spec.residual(signal, drift);
            for &r in enforced_rows {
                max_violation = max_violation.max(residual[r]);
            }
            nodes.push(NodeDrift { level: k, node: n, signal, drift, residual });
        }
    }
    let branch_probability = 1.0 / tree.step_outcomes() as f64;
    let density_error = (0..q.len())
        .map(|x| {
            let mut m = 1.0;
            for k in 0..depth {
                let parent = mass[k][tree.node_of(x, k)];
                let child = mass[k + 1][tree.node_of(x, k + 1)];
                m *= child / parent / branch_probability;
            }
            (m - mbar[x]).abs() / mbar[x].max(1.0)
        })
        .fold(0.0, f64::max);
    ExtractionReport { nodes, density_error, max_violation }
}

/// Objective of the Dirac control at `density`.
pub fn dirac_objective(tree: &ScenarioTree, u: &[f64], lambda: f64, density: &[f64]) -> f64 {
    strong_objective(&tree.probabilities(), u, lambda, density)
}
