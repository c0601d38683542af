//! Entropy-regularized density optimization over tree atoms:
//! maximize `sum_x p(x) [m(x) u(x) - lambda m(x) log m(x)]` subject to
//! `sum_x p(x) m(x) = 1` and `sum_x p(x) m(x) c_r(x) <= 0`.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tree::DiscreteConstraintSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualAscentOptions {
    pub max_iterations: usize,
    /// Bound on `max_r |min(mu_r, -g_r)|`, where `g_r` is the constraint value.
    pub tolerance: f64,
    /// Step is `step_scale / L` with `L = sum_r |c_r|_inf^2 / lambda`.
    pub step_scale: f64,
    /// Projected Newton iterations run when the gradient phase stalls.
    pub newton_iterations: usize,
}

impl Default for DualAscentOptions {
    fn default() -> Self {
        Self { max_iterations: 10_000, tolerance: 1e-9, step_scale: 0.5, newton_iterations: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongSolution {
    pub value: f64,
    /// Optimal density per atom.
    pub density: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Tilted Gibbs density `m ∝ exp((u - mu . c) / lambda)` and the dual value
/// `lambda log sum_x p(x) exp((u - mu . c) / lambda)`.
fn gibbs(p: &[f64], u: &[f64], lambda: f64, constraints: &DiscreteConstraintSet, mu: &[f64]) -> (Vec<f64>, f64) {
    let mut a: Vec<f64> = u.to_vec();
    for (form, m) in constraints.forms.iter().zip(mu) {
        if *m != 0.0 {
            for (ax, c) in a.iter_mut().zip(&form.values) {
                *ax -= m * c;
            }
        }
    }
    for ax in &mut a {
        *ax /= lambda;
    }
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = a.iter().zip(p).map(|(ax, px)| px * (ax - amax).exp()).sum();
    let log_norm = amax + s.ln();
    let density = a.iter().map(|ax| (ax - log_norm).exp()).collect();
    (density, lambda * log_norm)
}

/// `sum_x p(x) [m u - lambda m log m]`.
pub fn strong_objective(p: &[f64], u: &[f64], lambda: f64, density: &[f64]) -> f64 {
    p.iter()
        .zip(u)
        .zip(density)
        .map(|((px, ux), m)| px * (m * ux - lambda * entropy_term(*m)))
        .sum()
}

pub(crate) fn entropy_term(m: f64) -> f64 {
    if m > 0.0 {
        m * m.ln()
    } else {
        0.0
    }
}

fn kkt_residual(mu: &[f64], g: &[f64]) -> f64 {
    mu.iter().zip(g).map(|(m, gr)| m.min(-gr).abs()).fold(0.0, f64::max)
}

/// Whether some density with `m >= 0` satisfies all constraints.
fn check_feasible(p: &[f64], constraints: &DiscreteConstraintSet) -> Result<()> {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = p.iter().map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
    let norm: Vec<_> = vars.iter().zip(p).map(|(v, px)| (*v, *px)).collect();
    lp.add_constraint(norm.as_slice(), ComparisonOp::Eq, 1.0);
    for form in &constraints.forms {
        let row: Vec<_> = vars
            .iter()
            .zip(p)
            .zip(&form.values)
            .filter(|(_, c)| **c != 0.0)
            .map(|((v, px), c)| (*v, px * c))
            .collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Le, 0.0);
    }
    match lp.solve() {
        Ok(_) => Ok(()),
        Err(microlp::Error::Infeasible) => {
            Err(Error::Infeasible("no positive density satisfies the constraint forms".into()))
        }
        Err(e) => Err(Error::Lp(e.to_string())),
    }
}

pub fn solve_strong_discrete(
    p: &[f64],
    u: &[f64],
    lambda: f64,
    constraints: &DiscreteConstraintSet,
) -> Result<StrongSolution> {
    solve_strong_discrete_with(p, u, lambda, constraints, &DualAscentOptions::default())
}

/// Gibbs closed form without constraints; otherwise accelerated projected
/// gradient descent on the dual with adaptive restart, stopped early once
/// progress stalls and finished by projected Newton steps on the active set.
pub fn solve_strong_discrete_with(
    p: &[f64],
    u: &[f64],
    lambda: f64,
    constraints: &DiscreteConstraintSet,
    options: &DualAscentOptions,
) -> Result<StrongSolution> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParams("entropy weight must be positive".into()));
    }
    if p.len() != u.len() {
        return Err(Error::InvalidParams("probabilities and utilities differ in length".into()));
    }
    let r = constraints.len();
    if r == 0 {
        let (density, _) = gibbs(p, u, lambda, constraints, &[]);
        let value = strong_objective(p, u, lambda, &density);
        return Ok(StrongSolution { value, density, multipliers: Vec::new(), iterations: 0, kkt_residual: 0.0 });
    }
    check_feasible(p, constraints)?;

    let lipschitz = constraints.squared_sup_norm() / lambda;
    let step = options.step_scale / lipschitz;
    let mut mu = vec![0.0; r];
    let mut y = mu.clone();
    let mut t = 1.0f64;
    let (mut density, mut dual) = gibbs(p, u, lambda, constraints, &mu);
    let mut g = constraints.evaluate(p, &density);
    let mut residual = kkt_residual(&mu, &g);
    let mut iterations = 0;
    let mut best = residual;
    let mut since_best = 0;
    while residual > options.tolerance && iterations < options.max_iterations && since_best < 500 {
        iterations += 1;
        let (dy, _) = gibbs(p, u, lambda, constraints, &y);
        let gy = constraints.evaluate(p, &dy);
        let next: Vec<f64> = y.iter().zip(&gy).map(|(yr, gr)| (yr + step * gr).max(0.0)).collect();
        let (d_next, dual_next) = gibbs(p, u, lambda, constraints, &next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if dual_next > dual {
            // The dual went up: drop the momentum.
            t = 1.0;
            y = next.clone();
        } else {
            let beta = (t - 1.0) / t_next;
            y = next.iter().zip(&mu).map(|(n, m)| n + beta * (n - m)).collect();
            t = t_next;
        }
        mu = next;
        density = d_next;
        dual = dual_next;
        g = constraints.evaluate(p, &density);
        residual = kkt_residual(&mu, &g);
        if residual < 0.5 * best {
            best = residual;
            since_best = 0;
        } else {
            since_best += 1;
        }
    }
    if residual > options.tolerance {
        let polished = newton_polish(p, u, lambda, constraints, &mut mu, options);
        iterations += polished.0;
        residual = polished.1;
        density = gibbs(p, u, lambda, constraints, &mu).0;
    }
    if residual > options.tolerance {
        return Err(Error::NonConvergence { iterations, residual });
    }
    let value = strong_objective(p, u, lambda, &density);
    Ok(StrongSolution { value, density, multipliers: mu, iterations, kkt_residual: residual })
}

/// Projected Newton on the dual restricted to multipliers that are positive
/// or whose constraint is violated. Returns iterations used and the final
/// KKT residual.
fn newton_polish(
    p: &[f64],
    u: &[f64],
    lambda: f64,
    constraints: &DiscreteConstraintSet,
    mu: &mut [f64],
    options: &DualAscentOptions,
) -> (usize, f64) {
    let (mut density, mut dual) = gibbs(p, u, lambda, constraints, mu);
    let mut g = constraints.evaluate(p, &density);
    let mut residual = kkt_residual(mu, &g);
    let mut iterations = 0;
    while residual > options.tolerance && iterations < options.newton_iterations {
        iterations += 1;
        let active: Vec<usize> = (0..mu.len()).filter(|&r| mu[r] > 0.0 || g[r] > 0.0).collect();
        if active.is_empty() {
            break;
        }
        let k = active.len();
        let mut hessian = DMatrix::<f64>::zeros(k, k);
        for (i, &a) in active.iter().enumerate() {
            for (j, &b) in active.iter().enumerate().skip(i) {
                let ca = &constraints.forms[a].values;
                let cb = &constraints.forms[b].values;
                let second: f64 = (0..p.len()).map(|x| p[x] * density[x] * ca[x] * cb[x]).sum();
                let h = (second - g[a] * g[b]) / lambda;
                hessian[(i, j)] = h;
                hessian[(j, i)] = h;
            }
        }
        let ridge = 1e-12 * (1.0 + hessian.trace());
        for i in 0..k {
            hessian[(i, i)] += ridge;
        }
        let rhs = DVector::from_iterator(k, active.iter().map(|&r| g[r]));
        let Some(step) = hessian.lu().solve(&rhs) else { break };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = mu.to_vec();
            for (i, &r) in active.iter().enumerate() {
                trial[r] = (mu[r] + alpha * step[i]).max(0.0);
            }
            let (d, v) = gibbs(p, u, lambda, constraints, &trial);
            let gt = constraints.evaluate(p, &d);
            let rt = kkt_residual(&trial, &gt);
            if v <= dual + 1e-15 * dual.abs().max(1.0) || rt < residual {
                mu.copy_from_slice(&trial);
                density = d;
                dual = v;
                g = gt;
                residual = rt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (iterations, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConstraintSpec;
    use crate::model::ModelParams;
    use crate::oracle::tree::{build_tree, Channel};

    #[test]
    fn two_atom_gibbs() {
        let s = solve_strong_discrete(&[0.5, 0.5], &[1.0, -1.0], 1.0, &DiscreteConstraintSet::default()).unwrap();
        let c = 1f64.cosh();
        assert!((s.value - c.ln()).abs() < 1e-12);
        assert!((s.density[0] - 1f64.exp() / c).abs() < 1e-12);
        assert!((s.density[1] - (-1f64).exp() / c).abs() < 1e-12);
    }

    #[test]
    fn constant_utility_gives_unit_density() {
        let s = solve_strong_discrete(&[0.25; 4], &[0.7; 4], 2.0, &DiscreteConstraintSet::default()).unwrap();
        assert!(s.density.iter().all(|m| (m - 1.0).abs() < 1e-14));
        assert!((s.value - 0.7).abs() < 1e-14);
    }

    #[test]
    fn large_entropy_weight_approaches_mean_utility() {
        let u = [0.3, -0.2, 0.9, 0.1];
        let s = solve_strong_discrete(&[0.25; 4], &u, 1e3, &DiscreteConstraintSet::default()).unwrap();
        let mean = u.iter().sum::<f64>() / 4.0;
        assert!((s.value - mean).abs() <= 1e-2 * 1.1);
    }

    #[test]
    fn rate_bound_binds_and_is_met() {
        let params = ModelParams { epsilon: 0.5, ..ModelParams::default() };
        let tree = build_tree(2, 2, &[Channel::Inventory], &params).unwrap();
        let u: Vec<f64> = (0..4).map(|x| 2.0 * tree.path(x).z[2]).collect();
        let set = DiscreteConstraintSet::from_rows(&tree, &ConstraintSpec::with_bounds(-0.1, 0.1), &[4, 5]);
        let s = solve_strong_discrete(&tree.probabilities(), &u, 0.5, &set).unwrap();
        let g = set.evaluate(&tree.probabilities(), &s.density);
        assert!(g.iter().all(|v| *v <= 1e-9), "{g:?}");
        assert!(s.multipliers.iter().any(|m| *m > 0.0));
        let free = solve_strong_discrete(&tree.probabilities(), &u, 0.5, &DiscreteConstraintSet::default()).unwrap();
        assert!(s.value < free.value);
    }

    #[test]
    fn impossible_constraints_are_reported() {
        let params = ModelParams::default();
        let tree = build_tree(1, 2, &[Channel::Inventory], &params).unwrap();
        let set = DiscreteConstraintSet::from_rows(&tree, &ConstraintSpec::with_bounds(0.2, 0.4), &[4, 5]);
        let bad = DiscreteConstraintSet::from_rows(&tree, &ConstraintSpec::with_bounds(0.5, 0.4), &[4, 5]);
        assert!(solve_strong_discrete(&tree.probabilities(), &[0.0, 0.0], 1.0, &set).is_ok());
        assert!(matches!(
            solve_strong_discrete(&tree.probabilities(), &[0.0, 0.0], 1.0, &bad),
            Err(Error::Infeasible(_))
        ));
    }
}
