//! Path simulation under the reference and controlled measures, Girsanov
//! weights, the entropy identity and constraint-moment estimators.
//!
//! All stochastic integrals use left-point (Itô) evaluation. Under the
//! reference measure every one-step factor of the discrete density has
//! conditional mean one, so `E[M] = 1` holds exactly on the grid and only
//! Monte Carlo error remains.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConstraintSpec, DiscretizedPath, ModelParams, PathWeight, CONSTRAINT_ROWS};
use crate::policy::TradingRate;
use crate::rng::path_stream;
use crate::stats::{combined_se, Estimate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureTag {
    Reference,
    Controlled(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub paths: Vec<DiscretizedPath>,
    pub weights: Option<Vec<PathWeight>>,
    pub measure: MeasureTag,
    pub seed: u64,
}

impl PathBatch {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Attaches Girsanov weights of `policy` to a reference batch.
    pub fn with_weights(mut self, policy: &dyn TradingRate, params: &ModelParams) -> Self {
        let weights = self.paths.par_iter().map(|p| girsanov_weight(p, policy, params)).collect();
        self.weights = Some(weights);
        self
    }
}

/// Reference-measure path number `index` of the stream `seed`.
pub fn reference_path(params: &ModelParams, seed: u64, index: u64) -> DiscretizedPath {
    let n = params.n_steps;
    let dt = params.dt();
    let sq = dt.sqrt();
    let mut rng = path_stream(seed, index);
    let mut path = DiscretizedPath::zeros(params.horizon, n);
    for i in 0..n {
        let (a, b, c) = (rng.normal(), rng.normal(), rng.normal());
        path.p[i + 1] = path.p[i] + params.sigma * sq * a;
        path.z[i + 1] = path.z[i] + params.epsilon * sq * b;
        path.w[i + 1] = path.w[i] + sq * c;
    }
    path
}

/// Independent scaled Brownian paths `(sigma B1, epsilon B2, B3)`.
pub fn simulate_reference(params: &ModelParams, count: usize, seed: u64) -> PathBatch {
    let paths = (0..count as u64).into_par_iter().map(|i| reference_path(params, seed, i)).collect();
    PathBatch { paths, weights: None, measure: MeasureTag::Reference, seed }
}

/// Applies `f` to reference paths `0..count` without retaining them.
pub fn map_reference_paths<T, F>(params: &ModelParams, count: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&DiscretizedPath) -> T + Sync,
{
    (0..count as u64).into_par_iter().map(|i| f(&reference_path(params, seed, i))).collect()
}

/// A path simulated under a controlled measure with the rates actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledPath {
    pub path: DiscretizedPath,
    /// `rates[i]` is the rate applied on `[t_i, t_{i+1})`.
    pub rates: Vec<f64>,
}

/// Euler scheme for `dP = W dt + sigma dB`, `dZ = pi dt + epsilon dB'`,
/// `dW = dB''`. Uses the same normal draws as [`reference_path`] for the
/// same `(seed, index)`, which gives common random numbers across policies.
pub fn controlled_path(params: &ModelParams, policy: &dyn TradingRate, seed: u64, index: u64) -> ControlledPath {
    let n = params.n_steps;
    let dt = params.dt();
    let sq = dt.sqrt();
    let mut rng = path_stream(seed, index);
    let mut path = DiscretizedPath::zeros(params.horizon, n);
    let mut rates = Vec::with_capacity(n);
    let (mut int_p, mut int_z) = (0.0, 0.0);
    for i in 0..n {
        let state = path.state_at(i, int_p, int_z);
        let rate = policy.rate(&state);
        rates.push(rate);
        let (a, b, c) = (rng.normal(), rng.normal(), rng.normal());
        path.p[i + 1] = path.p[i] + path.w[i] * dt + params.sigma * sq * a;
        path.z[i + 1] = path.z[i] + rate * dt + params.epsilon * sq * b;
        path.w[i + 1] = path.w[i] + sq * c;
        int_p += path.p[i] * dt;
        int_z += path.z[i] * dt;
    }
    ControlledPath { path, rates }
}

pub fn simulate_controlled(
    params: &ModelParams,
    policy: &dyn TradingRate,
    count: usize,
    seed: u64,
) -> PathBatch {
    let paths = (0..count as u64)
        .into_par_iter()
        .map(|i| controlled_path(params, policy, seed, i).path)
        .collect();
    PathBatch { paths, weights: None, measure: MeasureTag::Controlled(policy.label()), seed }
}

pub fn map_controlled_paths<T, F>(
    params: &ModelParams,
    policy: &dyn TradingRate,
    count: usize,
    seed: u64,
    f: F,
) -> Vec<T>
where
    T: Send,
    F: Fn(&ControlledPath) -> T + Sync,
{
    (0..count as u64).into_par_iter().map(|i| f(&controlled_path(params, policy, seed, i))).collect()
}

/// Discrete Girsanov density of `Q^pi` against the reference measure:
///
/// `log M = sum_i [ -1/2 ((W_i/sigma)^2 + (pi_i/eps)^2) dt + W_i/sigma^2 dP_i + pi_i/eps^2 dZ_i ]`.
pub fn girsanov_weight(path: &DiscretizedPath, policy: &dyn TradingRate, params: &ModelParams) -> PathWeight {
    let dt = path.dt();
    let s2 = params.sigma * params.sigma;
    let e2 = params.epsilon * params.epsilon;
    let (mut log_m, mut int_rate_sq, mut int_signal_sq) = (0.0, 0.0, 0.0);
    let (mut int_p, mut int_z) = (0.0, 0.0);
    for i in 0..path.n_steps() {
        let state = path.state_at(i, int_p, int_z);
        let rate = policy.rate(&state);
        let w = path.w[i];
        let dp = path.p[i + 1] - path.p[i];
        let dz = path.z[i + 1] - path.z[i];
        log_m += -0.5 * (w * w / s2 + rate * rate / e2) * dt + w / s2 * dp + rate / e2 * dz;
        int_rate_sq += rate * rate * dt;
        int_signal_sq += w * w * dt;
        int_p += path.p[i] * dt;
        int_z += path.z[i] * dt;
    }
    PathWeight::from_parts(log_m, int_rate_sq, int_signal_sq)
}

/// Applies `f` to `(path, weight)` for reference paths `0..count`.
pub fn map_weighted_reference<T, F>(
    params: &ModelParams,
    policy: &dyn TradingRate,
    count: usize,
    seed: u64,
    f: F,
) -> Vec<T>
where
    T: Send,
    F: Fn(&DiscretizedPath, &PathWeight) -> T + Sync,
{
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let path = reference_path(params, seed, i);
            let weight = girsanov_weight(&path, policy, params);
            f(&path, &weight)
        })
        .collect()
}

/// Sample mean of `M` over reference paths.
pub fn normalization(params: &ModelParams, policy: &dyn TradingRate, count: usize, seed: u64) -> Estimate {
    let m = map_weighted_reference(params, policy, count, seed, |_, w| w.m);
    Estimate::from_samples(&m)
}

/// The two sides of the entropy identity `E[M log M] = 1/2 E[M int |nu|^2 dt]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
}

impl EntropyReport {
    pub fn combined_se(&self) -> f64 {
        combined_se(&self.lhs, &self.rhs)
    }

    pub fn agrees(&self, k: f64) -> bool {
        (self.lhs.mean - self.rhs.mean).abs() <= k * self.combined_se()
    }
}

fn entropy_terms(weight: &PathWeight, params: &ModelParams) -> (f64, f64) {
    let s2 = params.sigma * params.sigma;
    let e2 = params.epsilon * params.epsilon;
    let lhs = weight.m * weight.log_m;
    let rhs = 0.5 * weight.m * (weight.int_rate_sq / e2 + weight.int_signal_sq / s2);
    (lhs, rhs)
}

fn entropy_from_terms(terms: &[(f64, f64)]) -> EntropyReport {
    let lhs: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let rhs: Vec<f64> = terms.iter().map(|t| t.1).collect();
    EntropyReport { lhs: Estimate::from_samples(&lhs), rhs: Estimate::from_samples(&rhs) }
}

/// Entropy identity on a weighted reference batch.
pub fn entropy_report(batch: &PathBatch, params: &ModelParams) -> Result<EntropyReport> {
    let weights = batch
        .weights
        .as_ref()
        .ok_or_else(|| Error::InvalidParams("entropy report needs a weighted batch".into()))?;
    let terms: Vec<(f64, f64)> = weights.iter().map(|w| entropy_terms(w, params)).collect();
    Ok(entropy_from_terms(&terms))
}

/// Streaming version of [`entropy_report`].
pub fn entropy_report_streaming(
    params: &ModelParams,
    policy: &dyn TradingRate,
    count: usize,
    seed: u64,
) -> EntropyReport {
    let terms = map_weighted_reference(params, policy, count, seed, |_, w| entropy_terms(w, params));
    entropy_from_terms(&terms)
}

/// One-coordinate harness: `X` a standard Brownian motion and a constant
/// drift `nu`, for which the density and entropy are known in closed form.
pub mod reduced {
    use super::*;

    /// `sum_i (-1/2 nu^2 dt + nu dX_i)` over the given increments.
    pub fn log_weight(drift: f64, increments: &[f64], dt: f64) -> f64 {
        increments.iter().map(|dx| -0.5 * drift * drift * dt + drift * dx).sum()
    }

    fn terms(drift: f64, horizon: f64, n_steps: usize, seed: u64, index: u64) -> (f64, f64, f64) {
        let dt = horizon / n_steps as f64;
        let sq = dt.sqrt();
        let mut rng = path_stream(seed, index);
        let increments: Vec<f64> = (0..n_steps).map(|_| sq * rng.normal()).collect();
        let log_m = log_weight(drift, &increments, dt);
        let m = log_m.exp();
        (m, m * log_m, 0.5 * m * drift * drift * horizon)
    }

    pub fn normalization(drift: f64, horizon: f64, n_steps: usize, count: usize, seed: u64) -> Estimate {
        let m: Vec<f64> =
            (0..count as u64).into_par_iter().map(|i| terms(drift, horizon, n_steps, seed, i).0).collect();
        Estimate::from_samples(&m)
    }

    pub fn entropy_report(drift: f64, horizon: f64, n_steps: usize, count: usize, seed: u64) -> EntropyReport {
        let t: Vec<(f64, f64)> = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let (_, l, r) = terms(drift, horizon, n_steps, seed, i);
                (l, r)
            })
            .collect();
        entropy_from_terms(&t)
    }
}

/// Which bounded test functional `eta` is applied at time `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaKind {
    One,
    /// Ramp from 0 at `W_s = threshold` to 1 at `W_s = threshold + width`.
    SignalAbove(f64),
    InventoryAbove(f64),
}

pub const ETA_RAMP_WIDTH: f64 = 0.01;

/// Test functional for the constraint moments: `eta` reads the path only up
/// to `s ∧ tau_N`, and the moment is taken over the window `[s, t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaTest {
    pub kind: EtaKind,
    pub s: f64,
    pub t: f64,
    pub truncation: f64,
}

fn ramp(x: f64) -> f64 {
    (x / ETA_RAMP_WIDTH).clamp(0.0, 1.0)
}

impl EtaTest {
    pub fn value_at(&self, path: &DiscretizedPath, index: usize) -> f64 {
        match self.kind {
            EtaKind::One => 1.0,
            EtaKind::SignalAbove(th) => ramp(path.w[index] - th),
            EtaKind::InventoryAbove(th) => ramp(path.z[index] - th),
        }
    }

    pub fn window_indices(&self, dt: f64) -> (usize, usize) {
        let s = (self.s / dt + 1e-9).floor() as usize;
        let t = (self.t / dt + 1e-9).floor() as usize;
        (s, t)
    }

    /// Built-in family: constants and ramps at thresholds `{-1, 0, 1}`,
    /// three windows and truncation levels `{2, 5, 10}`.
    pub fn family(horizon: f64) -> Vec<EtaTest> {
        let mut kinds = vec![EtaKind::One];
        for th in [-1.0, 0.0, 1.0] {
            kinds.push(EtaKind::SignalAbove(th));
            kinds.push(EtaKind::InventoryAbove(th));
        }
        let windows = [(0.0, horizon), (0.25 * horizon, 0.75 * horizon), (0.5 * horizon, horizon)];
        let mut out = Vec::new();
        for kind in kinds {
            for (s, t) in windows {
                for truncation in [2.0, 5.0, 10.0] {
                    out.push(EtaTest { kind, s, t, truncation });
                }
            }
        }
        out
    }
}

/// First grid index where the largest coordinate magnitude reaches `level`,
/// or the last index if it never does.
pub fn truncation_index(path: &DiscretizedPath, level: f64) -> usize {
    (0..path.times.len())
        .find(|&i| path.p[i].abs().max(path.z[i].abs()).max(path.w[i].abs()) >= level)
        .unwrap_or(path.n_steps())
}

/// Running constraint accumulator `Y_t = int (b ds + A dX)` at every grid index.
pub fn constraint_accumulator(path: &DiscretizedPath, spec: &ConstraintSpec) -> Vec<[f64; CONSTRAINT_ROWS]> {
    let dt = path.dt();
    let mut acc = vec![[0.0; CONSTRAINT_ROWS]; path.times.len()];
    for i in 0..path.n_steps() {
        let dx = [path.p[i + 1] - path.p[i], path.z[i + 1] - path.z[i], path.w[i + 1] - path.w[i]];
        let inc = spec.accumulator_increment(path.w[i], dt, dx);
        for r in 0..CONSTRAINT_ROWS {
            acc[i + 1][r] = acc[i][r] + inc[r];
        }
    }
    acc
}

/// `eta * (Y_{t ∧ tau} - Y_{s ∧ tau})` for one path.
pub fn constraint_sample(
    path: &DiscretizedPath,
    accumulator: &[[f64; CONSTRAINT_ROWS]],
    eta: &EtaTest,
) -> [f64; CONSTRAINT_ROWS] {
    let (s, t) = eta.window_indices(path.dt());
    let tau = truncation_index(path, eta.truncation);
    let (si, ti) = (s.min(tau), t.min(tau));
    let e = eta.value_at(path, si);
    let mut out = [0.0; CONSTRAINT_ROWS];
    for r in 0..CONSTRAINT_ROWS {
        out[r] = e * (accumulator[ti][r] - accumulator[si][r]);
    }
    out
}

fn moments_from_samples(samples: &[[f64; CONSTRAINT_ROWS]]) -> [Estimate; CONSTRAINT_ROWS] {
    std::array::from_fn(|r| {
        let col: Vec<f64> = samples.iter().map(|s| s[r]).collect();
        Estimate::from_samples(&col)
    })
}

/// `E^W[M eta (Y_{t ∧ tau} - Y_{s ∧ tau})]` per constraint row on a weighted
/// reference batch.
pub fn constraint_moments(
    batch: &PathBatch,
    eta: &EtaTest,
    spec: &ConstraintSpec,
) -> Result<[Estimate; CONSTRAINT_ROWS]> {
    let weights = batch
        .weights
        .as_ref()
        .ok_or_else(|| Error::InvalidParams("constraint moments need a weighted batch".into()))?;
    let samples: Vec<[f64; CONSTRAINT_ROWS]> = batch
        .paths
        .par_iter()
        .zip(weights.par_iter())
        .map(|(path, w)| {
            let acc = constraint_accumulator(path, spec);
            let mut s = constraint_sample(path, &acc, eta);
            for v in &mut s {
                *v *= w.m;
            }
            s
        })
        .collect();
    Ok(moments_from_samples(&samples))
}

/// Streaming evaluation of many `eta` tests in one pass over the paths.
pub fn constraint_moments_streaming(
    params: &ModelParams,
    policy: &dyn TradingRate,
    etas: &[EtaTest],
    count: usize,
    seed: u64,
) -> Vec<[Estimate; CONSTRAINT_ROWS]> {
    let spec = ConstraintSpec::new(params);
    let per_path: Vec<Vec<[f64; CONSTRAINT_ROWS]>> = map_weighted_reference(params, policy, count, seed, |path, w| {
        let acc = constraint_accumulator(path, &spec);
        etas.iter()
            .map(|eta| {
                let mut s = constraint_sample(path, &acc, eta);
                for v in &mut s {
                    *v *= w.m;
                }
                s
            })
            .collect()
    });
    (0..etas.len())
        .map(|k| {
            let column: Vec<[f64; CONSTRAINT_ROWS]> = per_path.iter().map(|v| v[k]).collect();
            moments_from_samples(&column)
        })
        .collect()
}

const DUMP_MAGIC: &[u8; 4] = b"BFPB";
const DUMP_VERSION: u32 = 1;

/// Writes a batch in the little-endian dump layout:
///
/// ```text
/// magic "BFPB" | version u32 | n_steps u64 | count u64 | seed u64 | horizon f64
/// | has_weights u64 | tag_len u32 | tag bytes (UTF-8, empty = reference)
/// | count rows of [P_0..P_N, Z_0..Z_N, W_0..W_N] as f64
/// | if has_weights: count rows of [log_m, int_rate_sq, int_signal_sq] as f64
/// ```
pub fn write_batch<W: Write>(batch: &PathBatch, mut out: W) -> Result<()> {
    let n_steps = batch.paths.first().map(|p| p.n_steps()).unwrap_or(0);
    let horizon = batch.paths.first().map(|p| p.horizon()).unwrap_or(0.0);
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&DUMP_VERSION.to_le_bytes())?;
    out.write_all(&(n_steps as u64).to_le_bytes())?;
    out.write_all(&(batch.paths.len() as u64).to_le_bytes())?;
    out.write_all(&batch.seed.to_le_bytes())?;
    out.write_all(&horizon.to_le_bytes())?;
    out.write_all(&(batch.weights.is_some() as u64).to_le_bytes())?;
    let tag = match &batch.measure {
        MeasureTag::Reference => String::new(),
        MeasureTag::Controlled(label) => label.clone(),
    };
    out.write_all(&(tag.len() as u32).to_le_bytes())?;
    out.write_all(tag.as_bytes())?;
    for path in &batch.paths {
        for v in path.p.iter().chain(&path.z).chain(&path.w) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(weights) = &batch.weights {
        for w in weights {
            for v in [w.log_m, w.int_rate_sq, w.int_signal_sq] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| Error::Dump(e.to_string()))?;
    Ok(buf)
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(input)?))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(input)?))
}

pub fn read_batch<R: Read>(mut input: R) -> Result<PathBatch> {
    if &read_array::<4, _>(&mut input)? != DUMP_MAGIC {
        return Err(Error::Dump("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != DUMP_VERSION {
        return Err(Error::Dump(format!("unsupported version {version}")));
    }
    let n_steps = read_u64(&mut input)? as usize;
    let count = read_u64(&mut input)? as usize;
    let seed = read_u64(&mut input)?;
    let horizon = read_f64(&mut input)?;
    let has_weights = read_u64(&mut input)? != 0;
    let tag_len = u32::from_le_bytes(read_array(&mut input)?) as usize;
    let mut tag = vec![0u8; tag_len];
    input.read_exact(&mut tag).map_err(|e| Error::Dump(e.to_string()))?;
    let tag = String::from_utf8(tag).map_err(|e| Error::Dump(e.to_string()))?;
    let measure = if tag.is_empty() { MeasureTag::Reference } else { MeasureTag::Controlled(tag) };

    let mut paths = Vec::with_capacity(count);
    for _ in 0..count {
        let mut path = DiscretizedPath::zeros(horizon, n_steps.max(1));
        for column in [&mut path.p, &mut path.z, &mut path.w] {
            for v in column.iter_mut() {
                *v = read_f64(&mut input)?;
            }
        }
        paths.push(path);
    }
    let weights = if has_weights {
        let mut ws = Vec::with_capacity(count);
        for _ in 0..count {
            let (a, b, c) = (read_f64(&mut input)?, read_f64(&mut input)?, read_f64(&mut input)?);
            ws.push(PathWeight::from_parts(a, b, c));
        }
        Some(ws)
    } else {
        None
    };
    Ok(PathBatch { paths, weights, measure, seed })
}
