//! Backward explicit finite-difference solver for the agent's HJB equation
//!
//! `V_t + z w + max_{L <= pi <= U} (pi V_z - phi_a pi^2) + 1/2 eps^2 V_zz + 1/2 V_ww + [extra] = 0`,
//! `V(T, .) = -xi`,
//!
//! where `[extra]` is `w V_p + 1/2 sigma^2 V_pp` when the fee reads the
//! terminal price and `z V_I` when it reads the running inventory integral.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::contracts::{polynomial_value, Contract, PathOperator};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::policy::{FeedbackPolicy, PolicyAxis, StateCoord, UniformAxis};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbOptions {
    /// Intervals along `(w, z)` for two-dimensional problems.
    pub intervals_2d: [usize; 2],
    /// Intervals along `(w, z, extra)` for three-dimensional problems.
    pub intervals_3d: [usize; 3],
    /// Fixed number of time steps; chosen from the CFL bound when `None`.
    pub time_steps: Option<usize>,
    /// Lower bound on the automatically chosen number of time steps.
    pub min_time_steps: usize,
    /// Most time slices kept for the policy and value tables.
    pub max_slices_2d: usize,
    pub max_slices_3d: usize,
}

impl Default for HjbOptions {
    fn default() -> Self {
        Self {
            intervals_2d: [200, 200],
            intervals_3d: [48, 48, 48],
            time_steps: None,
            min_time_steps: 1000,
            max_slices_2d: 101,
            max_slices_3d: 21,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Extra {
    Price,
    InventoryIntegral,
}

type Terminal = Box<dyn Fn(f64, f64) -> f64 + Sync>;

/// A fee reduced to a terminal reward `-xi(z, x)` on an augmented state,
/// where `x` is the extra coordinate (ignored when there is none).
struct MarkovFee {
    extra: Option<Extra>,
    reward: Terminal,
}

fn has_price_terms(coefficients: &[Vec<f64>]) -> bool {
    coefficients.iter().skip(1).any(|row| row.iter().any(|a| *a != 0.0))
}

fn markov_fee(contract: &Contract, params: &ModelParams) -> Result<MarkovFee> {
    if let Some(c) = contract.as_constant() {
        return Ok(MarkovFee { extra: None, reward: Box::new(move |_, _| -c) });
    }
    match contract {
        Contract::LinearPolynomial { operator, coefficients, .. } => {
            let a = coefficients.clone();
            match (operator, has_price_terms(coefficients)) {
                (PathOperator::Terminal, true) => Ok(MarkovFee {
                    extra: Some(Extra::Price),
                    reward: Box::new(move |z, p| -polynomial_value(&a, p, z)),
                }),
                (PathOperator::Terminal, false) => {
                    Ok(MarkovFee { extra: None, reward: Box::new(move |z, _| -polynomial_value(&a, 0.0, z)) })
                }
                (PathOperator::TimeAverage, false) => {
                    let horizon = params.horizon;
                    Ok(MarkovFee {
                        extra: Some(Extra::InventoryIntegral),
                        reward: Box::new(move |_, int_z| -polynomial_value(&a, 0.0, int_z / horizon)),
                    })
                }
                (PathOperator::TimeAverage, true) => Err(Error::UnsupportedContract(
                    "time-averaged polynomial with price terms needs two running integrals".into(),
                )),
            }
        }
        Contract::LipschitzTable(table) => {
            let dt = params.dt();
            let terminal_only = table.sample_times.iter().all(|t| (t - params.horizon).abs() <= 0.5 * dt);
            if !terminal_only {
                return Err(Error::UnsupportedContract("table sampled before the horizon".into()));
            }
            let table = table.clone();
            Ok(MarkovFee {
                extra: Some(Extra::Price),
                reward: Box::new(move |z, p| -table.bilinear(p, z).clamp(-table.cap, table.cap)),
            })
        }
        Contract::Constant { .. } => unreachable!("handled above"),
    }
}

/// Whether [`solve_hjb`] accepts the contract.
pub fn is_markovian(contract: &Contract, params: &ModelParams) -> bool {
    markov_fee(contract, params).is_ok()
}

/// Computational domain half-widths `(w, z, p, int_z)`.
pub fn domain_half_widths(params: &ModelParams) -> [f64; 4] {
    let t = params.horizon;
    let rate = params.rate_lower.abs().max(params.rate_upper.abs());
    let w = 6.0 * t.sqrt();
    let z = 6.0 * params.epsilon * t.sqrt() + rate * t;
    let p = 6.0 * (params.sigma * params.sigma * t + t.powi(3) / 3.0).sqrt();
    let int_z = 6.0 * params.epsilon * (t.powi(3) / 3.0).sqrt() + 0.5 * rate * t * t;
    [w, z, p, int_z]
}

/// Value function samples on `(t, w, z[, extra])`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueGrid {
    pub time_nodes: Vec<f64>,
    pub axes: Vec<PolicyAxis>,
    /// Time-major, then axes in order, last axis fastest.
    pub values: Vec<f64>,
    pub time_steps: usize,
    pub dt: f64,
}

impl ValueGrid {
    pub fn slice_len(&self) -> usize {
        self.axes.iter().map(|a| a.axis.count).product()
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.slice_len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn spacings(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a.axis.step()).collect()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.axes.iter().map(|a| (a.axis.min, a.axis.max)).collect()
    }

    /// Multilinear interpolation within time slice `k`.
    pub fn interpolate(&self, k: usize, coords: &[f64]) -> f64 {
        let dims = self.axes.len();
        let slice = self.slice(k);
        let mut base = vec![0usize; dims];
        let mut frac = vec![0.0; dims];
        let mut stride = vec![1usize; dims];
        for d in (0..dims).rev() {
            let (i, f) = self.axes[d].axis.locate(coords[d]);
            base[d] = i;
            frac[d] = f;
            if d + 1 < dims {
                stride[d] = stride[d + 1] * self.axes[d + 1].axis.count;
            }
        }
        let mut total = 0.0;
        for corner in 0..(1usize << dims) {
            let mut weight = 1.0;
            let mut offset = 0;
            for d in 0..dims {
                let up = (corner >> d) & 1;
                weight *= if up == 1 { frac[d] } else { 1.0 - frac[d] };
                offset += (base[d] + up) * stride[d];
            }
            if weight != 0.0 {
                total += weight * slice[offset];
            }
        }
        total
    }

    /// `V(0, 0, ...)`.
    pub fn origin_value(&self) -> f64 {
        self.interpolate(0, &vec![0.0; self.axes.len()])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(self.axes.iter().map(|a| a.coord.name().to_string()));
        header.push("value".into());
        wtr.write_record(&header)?;
        let n = self.slice_len();
        let mut idx = vec![0usize; self.axes.len()];
        for (k, &t) in self.time_nodes.iter().enumerate() {
            for flat in 0..n {
                let mut rest = flat;
                for d in (0..self.axes.len()).rev() {
                    idx[d] = rest % self.axes[d].axis.count;
                    rest /= self.axes[d].axis.count;
                }
                let mut row = vec![t.to_string()];
                row.extend(self.axes.iter().zip(&idx).map(|(a, &i)| a.axis.node(i).to_string()));
                row.push(self.values[k * n + flat].to_string());
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

struct Grid {
    axes: Vec<PolicyAxis>,
    nodes: Vec<Vec<f64>>,
    steps: Vec<f64>,
    counts: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
    extra: Option<Extra>,
}

impl Grid {
    fn new(axes: Vec<PolicyAxis>, extra: Option<Extra>) -> Self {
        let counts: Vec<usize> = axes.iter().map(|a| a.axis.count).collect();
        let mut strides = vec![1usize; counts.len()];
        for d in (0..counts.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * counts[d + 1];
        }
        Self {
            nodes: axes.iter().map(|a| a.axis.nodes()).collect(),
            steps: axes.iter().map(|a| a.axis.step()).collect(),
            len: counts.iter().product(),
            axes,
            counts,
            strides,
            extra,
        }
    }

    fn index_of(&self, flat: usize, d: usize) -> usize {
        (flat / self.strides[d]) % self.counts[d]
    }

    fn is_interior(&self, flat: usize) -> bool {
        (0..self.counts.len()).all(|d| {
            let i = self.index_of(flat, d);
            i > 0 && i + 1 < self.counts[d]
        })
    }

    /// Boundary nodes of each dimension in the order they are filled:
    /// along dimension `d`, nodes that are interior in all later dimensions.
    fn boundary_plan(&self) -> Vec<(usize, isize)> {
        let dims = self.counts.len();
        let mut plan = Vec::new();
        for d in 0..dims {
            for flat in 0..self.len {
                let later_interior = ((d + 1)..dims).all(|j| {
                    let i = self.index_of(flat, j);
                    i > 0 && i + 1 < self.counts[j]
                });
                if !later_interior {
                    continue;
                }
                let i = self.index_of(flat, d);
                let s = self.strides[d] as isize;
                if i == 0 {
                    plan.push((flat, s));
                } else if i + 1 == self.counts[d] {
                    plan.push((flat, -s));
                }
            }
        }
        plan
    }
}

struct Coefficients {
    phi_a: f64,
    half_eps2: f64,
    half_sigma2: f64,
    lower: f64,
    upper: f64,
}

impl Coefficients {
    fn rate(&self, vz: f64) -> f64 {
        (vz / (2.0 * self.phi_a)).clamp(self.lower, self.upper)
    }
}

fn upwind(v: &[f64], flat: usize, stride: usize, h: f64, drift: f64) -> f64 {
    if drift > 0.0 {
        (v[flat + stride] - v[flat]) / h
    } else {
        (v[flat] - v[flat - stride]) / h
    }
}

fn second(v: &[f64], flat: usize, stride: usize, h: f64) -> f64 {
    (v[flat + stride] - 2.0 * v[flat] + v[flat - stride]) / (h * h)
}

fn rate_at(v: &[f64], grid: &Grid, c: &Coefficients, flat: usize) -> f64 {
    let s = grid.strides[1];
    let h = grid.steps[1];
    let iz = grid.index_of(flat, 1);
    let vz = if iz == 0 {
        (v[flat + s] - v[flat]) / h
    } else if iz + 1 == grid.counts[1] {
        (v[flat] - v[flat - s]) / h
    } else {
        (v[flat + s] - v[flat - s]) / (2.0 * h)
    };
    c.rate(vz)
}

fn hamiltonian(v: &[f64], grid: &Grid, c: &Coefficients, flat: usize) -> f64 {
    let w = grid.nodes[0][grid.index_of(flat, 0)];
    let z = grid.nodes[1][grid.index_of(flat, 1)];
    let (sw, sz) = (grid.strides[0], grid.strides[1]);
    let (hw, hz) = (grid.steps[0], grid.steps[1]);
    let pi = c.rate((v[flat + sz] - v[flat - sz]) / (2.0 * hz));
    let mut h = z * w + pi * upwind(v, flat, sz, hz, pi) - c.phi_a * pi * pi
        + c.half_eps2 * second(v, flat, sz, hz)
        + 0.5 * second(v, flat, sw, hw);
    match grid.extra {
        Some(Extra::Price) => {
            let (s, hp) = (grid.strides[2], grid.steps[2]);
            h += w * upwind(v, flat, s, hp, w) + c.half_sigma2 * second(v, flat, s, hp);
        }
        Some(Extra::InventoryIntegral) => {
            let (s, hi) = (grid.strides[2], grid.steps[2]);
            h += z * upwind(v, flat, s, hi, z);
        }
        None => {}
    }
    h
}

/// Largest stable explicit time step for the grid.
fn cfl_max_step(grid: &Grid, params: &ModelParams, half: &[f64; 4]) -> f64 {
    let rate = params.rate_lower.abs().max(params.rate_upper.abs());
    let hw = grid.steps[0];
    let hz = grid.steps[1];
    let mut sum = 1.0 / (hw * hw) + params.epsilon * params.epsilon / (hz * hz) + rate / hz;
    match grid.extra {
        Some(Extra::Price) => {
            let hp = grid.steps[2];
            sum += params.sigma * params.sigma / (hp * hp) + half[0] / hp;
        }
        Some(Extra::InventoryIntegral) => sum += half[1] / grid.steps[2],
        None => {}
    }
    1.0 / sum
}

/// Solves the agent's HJB equation for a Markovian fee.
///
/// Returns the optimal feedback rate `clamp(V_z / (2 phi_a), L, U)` and the
/// value grid. The policy stored at time `t_n` is the one applied on
/// `[t_n, t_{n+1})`.
pub fn solve_hjb(contract: &Contract, params: &ModelParams) -> Result<(FeedbackPolicy, ValueGrid)> {
    solve_hjb_with(contract, params, &HjbOptions::default())
}

pub fn solve_hjb_with(
    contract: &Contract,
    params: &ModelParams,
    options: &HjbOptions,
) -> Result<(FeedbackPolicy, ValueGrid)> {
    let fee = markov_fee(contract, params)?;
    let half = domain_half_widths(params);
    let mut axes = Vec::new();
    let max_slices = match fee.extra {
        None => {
            let [nw, nz] = options.intervals_2d;
            axes.push(PolicyAxis { coord: StateCoord::Signal, axis: UniformAxis::symmetric(half[0], nw) });
            axes.push(PolicyAxis { coord: StateCoord::Inventory, axis: UniformAxis::symmetric(half[1], nz) });
            options.max_slices_2d
        }
        Some(extra) => {
            let [nw, nz, ne] = options.intervals_3d;
            axes.push(PolicyAxis { coord: StateCoord::Signal, axis: UniformAxis::symmetric(half[0], nw) });
            axes.push(PolicyAxis { coord: StateCoord::Inventory, axis: UniformAxis::symmetric(half[1], nz) });
            let (coord, width) = match extra {
                Extra::Price => (StateCoord::Price, half[2]),
                Extra::InventoryIntegral => (StateCoord::InventoryIntegral, half[3]),
            };
            axes.push(PolicyAxis { coord, axis: UniformAxis::symmetric(width, ne) });
            options.max_slices_3d
        }
    };
    if axes.iter().any(|a| a.axis.count < 4) {
        return Err(Error::InvalidParams("HJB grid needs at least 3 intervals per axis".into()));
    }
    let grid = Grid::new(axes, fee.extra);

    let dt_max = cfl_max_step(&grid, params, &half);
    let time_steps = match options.time_steps {
        Some(n) => {
            let dt = params.horizon / n as f64;
            if dt > dt_max {
                return Err(Error::Cfl { actual: dt, required_max: dt_max });
            }
            n
        }
        None => (((params.horizon / dt_max) * 1.05).ceil() as usize).max(options.min_time_steps),
    };
    let dt = params.horizon / time_steps as f64;
    let coeffs = Coefficients {
        phi_a: params.phi_a,
        half_eps2: 0.5 * params.epsilon * params.epsilon,
        half_sigma2: 0.5 * params.sigma * params.sigma,
        lower: params.rate_lower,
        upper: params.rate_upper,
    };

    let stride = time_steps.div_ceil(max_slices.max(2) - 1).max(1);
    let keep = |n: usize| n.is_multiple_of(stride) || n == time_steps;

    let mut v: Vec<f64> = (0..grid.len)
        .into_par_iter()
        .map(|flat| {
            let z = grid.nodes[1][grid.index_of(flat, 1)];
            let x = if grid.extra.is_some() { grid.nodes[2][grid.index_of(flat, 2)] } else { 0.0 };
            (fee.reward)(z, x)
        })
        .collect();
    let boundary = grid.boundary_plan();
    let interior: Vec<bool> = (0..grid.len).map(|flat| grid.is_interior(flat)).collect();

    let mut value_slices: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut policy_slices: Vec<(f64, Vec<f64>)> = Vec::new();
    let policy_of = |v: &[f64]| -> Vec<f64> {
        (0..grid.len).into_par_iter().map(|flat| rate_at(v, &grid, &coeffs, flat)).collect()
    };
    value_slices.push((params.horizon, v.clone()));
    policy_slices.push((params.horizon, policy_of(&v)));

    let mut next = vec![0.0; grid.len];
    for n in (0..time_steps).rev() {
        if keep(n) {
            policy_slices.push((n as f64 * dt, policy_of(&v)));
        }
        next.par_iter_mut().enumerate().for_each(|(flat, out)| {
            if interior[flat] {
                *out = v[flat] + dt * hamiltonian(&v, &grid, &coeffs, flat);
            }
        });
        for &(flat, s) in &boundary {
            let a = (flat as isize + s) as usize;
            let b = (flat as isize + 2 * s) as usize;
            next[flat] = 2.0 * next[a] - next[b];
        }
        std::mem::swap(&mut v, &mut next);
        if keep(n) {
            value_slices.push((n as f64 * dt, v.clone()));
        }
    }

    value_slices.reverse();
    policy_slices.reverse();
    let value_grid = ValueGrid {
        time_nodes: value_slices.iter().map(|s| s.0).collect(),
        axes: grid.axes.clone(),
        values: value_slices.into_iter().flat_map(|s| s.1).collect(),
        time_steps,
        dt,
    };
    let policy = FeedbackPolicy::new(
        policy_slices.iter().map(|s| s.0).collect(),
        grid.axes.clone(),
        policy_slices.into_iter().flat_map(|s| s.1).collect(),
        params.rate_lower,
        params.rate_upper,
        "hjb",
    );
    Ok((policy, value_grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PathState;
    use crate::policy::TradingRate;

    fn wide() -> ModelParams {
        ModelParams { rate_lower: -100.0, rate_upper: 100.0, ..ModelParams::default() }
    }

    fn small() -> HjbOptions {
        HjbOptions { intervals_2d: [60, 40], ..HjbOptions::default() }
    }

    #[test]
    fn constant_fee_matches_closed_form() {
        let p = wide();
        let (policy, grid) = solve_hjb_with(&Contract::constant(0.3), &p, &small()).unwrap();
        let v = grid.origin_value();
        assert!((v - (-0.3 + 1.0 / 24.0)).abs() < 0.01 / 24.0 + 1e-3, "{v}");
        let s = PathState { t: 0.5, w: 1.0, z: 2.0, ..Default::default() };
        assert!((policy.rate(&s) - 0.5).abs() < 0.02, "{}", policy.rate(&s));
    }

    #[test]
    fn terminal_slice_is_exact() {
        let p = wide();
        let c = Contract::linear_inventory(0.2);
        let (_, grid) = solve_hjb_with(&c, &p, &small()).unwrap();
        let last = grid.time_nodes.len() - 1;
        assert_eq!(grid.time_nodes[last], p.horizon);
        let z_axis = grid.axes[1].axis;
        for (flat, v) in grid.slice(last).iter().enumerate() {
            let z = z_axis.node(flat % z_axis.count);
            assert_eq!(*v, -0.2 * z);
        }
        assert!(grid.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frozen_rates_give_zero_policy_and_fee_value() {
        let p = ModelParams { rate_lower: 0.0, rate_upper: 0.0, ..ModelParams::default() };
        let (policy, grid) = solve_hjb_with(&Contract::constant(0.7), &p, &small()).unwrap();
        assert!(policy.values().iter().all(|v| *v == 0.0));
        assert!((grid.origin_value() + 0.7).abs() < 1e-9, "{}", grid.origin_value());
    }

    #[test]
    fn too_few_steps_reports_cfl_bound() {
        let p = wide();
        let opts = HjbOptions { time_steps: Some(5), ..small() };
        match solve_hjb_with(&Contract::constant(0.0), &p, &opts) {
            Err(Error::Cfl { actual, required_max }) => {
                assert!((actual - 0.2).abs() < 1e-12);
                assert!(required_max < actual);
            }
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn time_average_with_price_terms_is_rejected() {
        let mut c = Contract::zero_polynomial(1, 5.0, PathOperator::TimeAverage);
        if let Contract::LinearPolynomial { coefficients, .. } = &mut c {
            coefficients[1][1] = 1.0;
        }
        assert!(matches!(solve_hjb(&c, &wide()), Err(Error::UnsupportedContract(_))));
        assert!(!is_markovian(&c, &wide()));
    }

    #[test]
    fn translation_shifts_value_only() {
        let p = ModelParams { rate_lower: -2.0, rate_upper: 2.0, ..ModelParams::default() };
        let (pa, ga) = solve_hjb_with(&Contract::constant(0.0), &p, &small()).unwrap();
        let (pb, gb) = solve_hjb_with(&Contract::constant(1.5), &p, &small()).unwrap();
        assert!((ga.origin_value() - gb.origin_value() - 1.5).abs() < 1e-9);
        let worst = pa.values().iter().zip(pb.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }
}
