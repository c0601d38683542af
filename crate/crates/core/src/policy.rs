//! Trading-rate rules.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ModelParams, PathState};

/// A feedback trading rate `pi(t, state)`.
pub trait TradingRate: Send + Sync {
    fn rate(&self, state: &PathState) -> f64;

    /// Identifier recorded in batch tags and reports.
    fn label(&self) -> String;
}

/// `pi == c`. Not clamped, so it can also represent inadmissible rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRate(pub f64);

impl TradingRate for ConstantRate {
    fn rate(&self, _state: &PathState) -> f64 {
        self.0
    }

    fn label(&self) -> String {
        format!("constant({})", self.0)
    }
}

/// `pi = clamp((w (T - t) - shift) / (2 phi_a), L, U)`.
///
/// Closed-form best response to a fee `shift * Z_T + const` when the bounds
/// do not bind; used as an analytic reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSignalRate {
    pub horizon: f64,
    pub phi_a: f64,
    pub shift: f64,
    pub lower: f64,
    pub upper: f64,
}

impl LinearSignalRate {
    pub fn new(params: &ModelParams, shift: f64) -> Self {
        Self {
            horizon: params.horizon,
            phi_a: params.phi_a,
            shift,
            lower: params.rate_lower,
            upper: params.rate_upper,
        }
    }
}

impl TradingRate for LinearSignalRate {
    fn rate(&self, s: &PathState) -> f64 {
        ((s.w * (self.horizon - s.t) - self.shift) / (2.0 * self.phi_a)).clamp(self.lower, self.upper)
    }

    fn label(&self) -> String {
        format!("linear_signal(shift={})", self.shift)
    }
}

/// State coordinate a policy table is indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateCoord {
    Signal,
    Inventory,
    Price,
    InventoryIntegral,
    PriceIntegral,
}

impl StateCoord {
    pub fn read(self, s: &PathState) -> f64 {
        match self {
            StateCoord::Signal => s.w,
            StateCoord::Inventory => s.z,
            StateCoord::Price => s.p,
            StateCoord::InventoryIntegral => s.int_z,
            StateCoord::PriceIntegral => s.int_p,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StateCoord::Signal => "w",
            StateCoord::Inventory => "z",
            StateCoord::Price => "p",
            StateCoord::InventoryIntegral => "int_z",
            StateCoord::PriceIntegral => "int_p",
        }
    }
}

/// Uniform grid axis `min, min + h, ..., max` with `count` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl UniformAxis {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        assert!(count >= 2 && max > min, "axis needs two distinct nodes");
        Self { min, max, count }
    }

    /// Symmetric axis `[-half_width, half_width]` with `intervals + 1` nodes.
    pub fn symmetric(half_width: f64, intervals: usize) -> Self {
        Self::new(-half_width, half_width, intervals + 1)
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.max
        } else {
            self.min + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.node(i)).collect()
    }

    /// Lower cell index and fractional position, clamped to the axis range.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let u = ((x - self.min) / self.step()).clamp(0.0, (self.count - 1) as f64);
        let i = (u.floor() as usize).min(self.count - 2);
        (i, u - i as f64)
    }
}

fn locate_sorted(nodes: &[f64], x: f64) -> (usize, f64) {
    if nodes.len() == 1 {
        return (0, 0.0);
    }
    if x <= nodes[0] {
        return (0, 0.0);
    }
    let last = nodes.len() - 1;
    if x >= nodes[last] {
        return (last - 1, 1.0);
    }
    let hi = nodes.partition_point(|n| *n <= x);
    let i = hi - 1;
    (i, (x - nodes[i]) / (nodes[i + 1] - nodes[i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAxis {
    pub coord: StateCoord,
    pub axis: UniformAxis,
}

/// Rate table over `(t, state axes...)` with multilinear interpolation.
///
/// Stored values are clamped to `[lower, upper]` on construction, and
/// interpolation forms convex combinations of stored values, so every
/// evaluated rate lies in the same interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    time_nodes: Vec<f64>,
    axes: Vec<PolicyAxis>,
    values: Vec<f64>,
    lower: f64,
    upper: f64,
    label: String,
}

impl FeedbackPolicy {
    /// `values` is time-major, then axes in order, last axis fastest.
    pub fn new(
        time_nodes: Vec<f64>,
        axes: Vec<PolicyAxis>,
        mut values: Vec<f64>,
        lower: f64,
        upper: f64,
        label: impl Into<String>,
    ) -> Self {
        assert!(!time_nodes.is_empty());
        assert!(time_nodes.windows(2).all(|w| w[0] < w[1]), "time nodes must increase");
        let expected = time_nodes.len() * axes.iter().map(|a| a.axis.count).product::<usize>();
        assert_eq!(values.len(), expected, "value table has wrong size");
        for v in &mut values {
            *v = v.clamp(lower, upper);
        }
        Self { time_nodes, axes, values, lower, upper, label: label.into() }
    }

    /// Tabulates an arbitrary rule on the given grid.
    pub fn from_rule(
        time_nodes: Vec<f64>,
        axes: Vec<PolicyAxis>,
        lower: f64,
        upper: f64,
        label: impl Into<String>,
        rule: impl Fn(&PathState) -> f64,
    ) -> Self {
        let slice: usize = axes.iter().map(|a| a.axis.count).product();
        let mut values = Vec::with_capacity(time_nodes.len() * slice);
        let mut idx = vec![0usize; axes.len()];
        for &t in &time_nodes {
            for flat in 0..slice {
                unflatten(flat, &axes, &mut idx);
                let mut s = PathState { t, ..Default::default() };
                for (a, &i) in axes.iter().zip(&idx) {
                    set_coord(&mut s, a.coord, a.axis.node(i));
                }
                values.push(rule(&s));
            }
        }
        Self::new(time_nodes, axes, values, lower, upper, label)
    }

    pub fn time_nodes(&self) -> &[f64] {
        &self.time_nodes
    }

    pub fn axes(&self) -> &[PolicyAxis] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut_clamped(&mut self, index: usize, value: f64) {
        self.values[index] = value.clamp(self.lower, self.upper);
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn slice_len(&self) -> usize {
        self.axes.iter().map(|a| a.axis.count).product()
    }

    /// Grid coordinates of table entry `index`: `(t, [axis values])`.
    pub fn node_of(&self, index: usize) -> (f64, Vec<f64>) {
        let slice = self.slice_len();
        let t = self.time_nodes[index / slice];
        let mut idx = vec![0usize; self.axes.len()];
        unflatten(index % slice, &self.axes, &mut idx);
        let coords = self.axes.iter().zip(&idx).map(|(a, &i)| a.axis.node(i)).collect();
        (t, coords)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(self.axes.iter().map(|a| a.coord.name().to_string()));
        header.push("rate".into());
        wtr.write_record(&header)?;
        for index in 0..self.values.len() {
            let (t, coords) = self.node_of(index);
            let mut row = vec![t.to_string()];
            row.extend(coords.iter().map(|c| c.to_string()));
            row.push(self.values[index].to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn set_coord(s: &mut PathState, coord: StateCoord, v: f64) {
    match coord {
        StateCoord::Signal => s.w = v,
        StateCoord::Inventory => s.z = v,
        StateCoord::Price => s.p = v,
        StateCoord::InventoryIntegral => s.int_z = v,
        StateCoord::PriceIntegral => s.int_p = v,
    }
}

fn unflatten(mut flat: usize, axes: &[PolicyAxis], idx: &mut [usize]) {
    for d in (0..axes.len()).rev() {
        let n = axes[d].axis.count;
        idx[d] = flat % n;
        flat /= n;
    }
}

const MAX_DIMS: usize = 6;

impl TradingRate for FeedbackPolicy {
    fn rate(&self, s: &PathState) -> f64 {
        let dims = self.axes.len() + 1;
        debug_assert!(dims <= MAX_DIMS);
        let mut base = [0usize; MAX_DIMS];
        let mut frac = [0.0f64; MAX_DIMS];
        let mut stride = [0usize; MAX_DIMS];

        let (ti, tf) = locate_sorted(&self.time_nodes, s.t);
        base[0] = ti;
        frac[0] = tf;
        for (d, a) in self.axes.iter().enumerate() {
            let (i, f) = a.axis.locate(a.coord.read(s));
            base[d + 1] = i;
            frac[d + 1] = f;
        }
        let mut acc = 1usize;
        for d in (1..dims).rev() {
            stride[d] = acc;
            acc *= self.axes[d - 1].axis.count;
        }
        stride[0] = acc;
        let single_time = self.time_nodes.len() == 1;

        let mut total = 0.0;
        for corner in 0..(1usize << dims) {
            let mut weight = 1.0;
            let mut offset = 0usize;
            let mut skip = false;
            for d in 0..dims {
                let up = (corner >> d) & 1 == 1;
                if d == 0 && single_time {
                    if up {
                        skip = true;
                        break;
                    }
                    continue;
                }
                weight *= if up { frac[d] } else { 1.0 - frac[d] };
                offset += (base[d] + up as usize) * stride[d];
            }
            if skip || weight == 0.0 {
                continue;
            }
            total += weight * self.values[offset];
        }
        total.clamp(self.lower, self.upper)
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}
