//! The principal's contract search: objective evaluation with participation
//! filtering, a feasibility seed, Latin-hypercube screening followed by
//! Nelder-Mead refinement, and diagnostics on the resulting sequence.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{best_response_with, AgentOptions, ResponseMethod};
use crate::contracts::{Contract, FamilySpec};
use crate::error::{Error, Result};
use crate::girsanov::map_controlled_paths;
use crate::model::{DiscretizedPath, ModelParams};
use crate::rng::task_rng;
use crate::stats::Estimate;

/// Pathwise principal reward `xi - phi_p * int pi^2 dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalUtilitySpec {
    pub phi_p: f64,
}

impl PrincipalUtilitySpec {
    pub fn from_params(params: &ModelParams) -> Self {
        Self { phi_p: params.phi_p }
    }

    /// Left-point sum over the rates applied on each step.
    pub fn pathwise_objective(&self, fee: f64, path: &DiscretizedPath, rates: &[f64]) -> f64 {
        let dt = path.dt();
        let mut penalty = 0.0;
        for r in rates {
            penalty += r * r * dt;
        }
        fee - self.phi_p * penalty
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalEvaluation {
    pub principal_value: Estimate,
    pub agent_value: Estimate,
    /// `V_a >= R_a - 3 SE`.
    pub participates: bool,
    pub method: ResponseMethod,
}

fn participates(agent_value: &Estimate, reservation: f64) -> bool {
    agent_value.mean >= reservation - 3.0 * agent_value.se
}

pub fn principal_objective(contract: &Contract, params: &ModelParams) -> Result<PrincipalEvaluation> {
    principal_objective_with(contract, params, &AgentOptions::default())
}

/// Solves the agent's problem, then estimates the principal's reward under
/// the controlled measure with `params.n_paths` paths from `params.seed`.
pub fn principal_objective_with(
    contract: &Contract,
    params: &ModelParams,
    options: &AgentOptions,
) -> Result<PrincipalEvaluation> {
    let response = best_response_with(contract, params, options)?;
    let spec = PrincipalUtilitySpec::from_params(params);
    let samples = map_controlled_paths(params, &response.policy, params.n_paths, params.seed, |cp| {
        spec.pathwise_objective(contract.evaluate(&cp.path), &cp.path, &cp.rates)
    });
    let agent_value = response.value;
    Ok(PrincipalEvaluation {
        principal_value: Estimate::from_samples(&samples),
        agent_value,
        participates: participates(&agent_value, params.reservation),
        method: response.method,
    })
}

/// Constant fee `V~ - R_a`, where `V~` is the agent's value at a zero fee.
pub fn feasibility_seed(params: &ModelParams, family: &FamilySpec) -> Result<Contract> {
    feasibility_seed_with(params, family, &AgentOptions::default())
}

pub fn feasibility_seed_with(params: &ModelParams, family: &FamilySpec, options: &AgentOptions) -> Result<Contract> {
    let response = best_response_with(&Contract::constant(0.0), params, options)?;
    let needed = response.value.mean - params.reservation;
    if needed.abs() > family.cap() {
        return Err(Error::CapTooSmall { cap: family.cap(), required: needed.abs() });
    }
    family
        .constant(needed)
        .ok_or_else(|| Error::UnsupportedContract("family has no constant members".into()))
}

/// Splits off the additive constant of a fee. The agent's response does not
/// depend on it, so responses are shared between fees differing only there.
fn split_shift(contract: &Contract) -> (f64, Contract) {
    match contract {
        Contract::Constant { value, cap } => (*value, Contract::Constant { value: 0.0, cap: *cap }),
        Contract::LinearPolynomial { degree, cap, operator, coefficients } => {
            let mut base = coefficients.clone();
            let shift = base[0][0];
            base[0][0] = 0.0;
            (
                shift,
                Contract::LinearPolynomial { degree: *degree, cap: *cap, operator: *operator, coefficients: base },
            )
        }
        Contract::LipschitzTable(_) => (0.0, contract.clone()),
    }
}

/// Evaluations of shift-free fees, keyed by their serialization.
struct Evaluator<'a> {
    params: &'a ModelParams,
    options: &'a AgentOptions,
    cache: BTreeMap<String, PrincipalEvaluation>,
}

impl<'a> Evaluator<'a> {
    fn evaluate_all(&mut self, contracts: &[Contract]) -> Result<Vec<PrincipalEvaluation>> {
        let split: Vec<(f64, Contract, String)> = contracts
            .iter()
            .map(|c| {
                let (shift, base) = split_shift(c);
                let key = base.to_record();
                (shift, base, key)
            })
            .collect();
        let mut missing: Vec<(&String, &Contract)> = Vec::new();
        for (_, base, key) in &split {
            if !self.cache.contains_key(key) && !missing.iter().any(|(k, _)| *k == key) {
                missing.push((key, base));
            }
        }
        let (params, options) = (self.params, self.options);
        let fresh: Vec<Result<PrincipalEvaluation>> =
            missing.par_iter().map(|(_, base)| principal_objective_with(base, params, options)).collect();
        for ((key, _), eval) in missing.iter().zip(fresh) {
            self.cache.insert((*key).clone(), eval?);
        }
        Ok(split
            .iter()
            .map(|(shift, _, key)| {
                let base = &self.cache[key];
                let agent_value = Estimate { mean: base.agent_value.mean - shift, se: base.agent_value.se };
                PrincipalEvaluation {
                    principal_value: Estimate {
                        mean: base.principal_value.mean + shift,
                        se: base.principal_value.se,
                    },
                    agent_value,
                    participates: participates(&agent_value, params.reservation),
                    method: base.method,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStage {
    Screening,
    Refinement,
}

impl SearchStage {
    fn name(self) -> &'static str {
        match self {
            SearchStage::Screening => "screening",
            SearchStage::Refinement => "refinement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub iteration: usize,
    pub stage: SearchStage,
    pub coefficients: Vec<f64>,
    pub contract: Contract,
    pub principal_value: Estimate,
    pub agent_value: Estimate,
    pub participates: bool,
    /// Best participating `J_p` so far, including this record.
    pub best_value: Option<f64>,
    /// Coefficients of the incumbent after this record.
    pub incumbent: Option<Vec<f64>>,
}

/// Every evaluated contract in order, with the running incumbent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaximizingSequence {
    pub records: Vec<SequenceRecord>,
}

impl MaximizingSequence {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends an evaluation and updates the incumbent when it participates
    /// and strictly improves on the best value.
    pub fn push(&mut self, stage: SearchStage, coefficients: Vec<f64>, contract: Contract, eval: &PrincipalEvaluation) {
        let (mut best_value, mut incumbent) = match self.records.last() {
            Some(r) => (r.best_value, r.incumbent.clone()),
            None => (None, None),
        };
        let value = eval.principal_value.mean;
        if eval.participates && best_value.is_none_or(|b| value > b) {
            best_value = Some(value);
            incumbent = Some(coefficients.clone());
        }
        self.records.push(SequenceRecord {
            iteration: self.records.len(),
            stage,
            coefficients,
            contract,
            principal_value: eval.principal_value,
            agent_value: eval.agent_value,
            participates: eval.participates,
            best_value,
            incumbent,
        });
    }

    /// Record holding the current incumbent.
    pub fn incumbent(&self) -> Option<&SequenceRecord> {
        let best = self.records.last()?.best_value?;
        self.records.iter().find(|r| r.participates && r.principal_value.mean == best)
    }

    /// Columns: `iteration, stage, c0.., j_p, j_p_se, v_a, v_a_se,
    /// participates, best_j_p, incumbent_c0..`. Empty cells mark a missing
    /// incumbent.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.records.first().map_or(0, |r| r.coefficients.len());
        let mut header = vec!["iteration".to_string(), "stage".to_string()];
        header.extend((0..d).map(|i| format!("c{i}")));
        header.extend(["j_p", "j_p_se", "v_a", "v_a_se", "participates", "best_j_p"].map(String::from));
        header.extend((0..d).map(|i| format!("incumbent_c{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.iteration.to_string(), r.stage.name().to_string()];
            row.extend(r.coefficients.iter().map(|c| format!("{c:e}")));
            row.extend([
                format!("{:e}", r.principal_value.mean),
                format!("{:e}", r.principal_value.se),
                format!("{:e}", r.agent_value.mean),
                format!("{:e}", r.agent_value.se),
                r.participates.to_string(),
                r.best_value.map_or(String::new(), |b| format!("{b:e}")),
            ]);
            match &r.incumbent {
                Some(inc) => row.extend(inc.iter().map(|c| format!("{c:e}"))),
                None => row.extend((0..d).map(|_| String::new())),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sequence serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    /// Total objective evaluations.
    pub budget: usize,
    /// Share of the budget spent on screening.
    pub screening_fraction: f64,
    pub agent: AgentOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { budget: 200, screening_fraction: 0.4, agent: AgentOptions::default() }
    }
}

pub fn optimize(family: &FamilySpec, params: &ModelParams, budget: usize) -> Result<(Contract, MaximizingSequence)> {
    optimize_with(family, params, &SearchOptions { budget, ..SearchOptions::default() })
}

struct Search<'a> {
    family: &'a FamilySpec,
    evaluator: Evaluator<'a>,
    sequence: MaximizingSequence,
    budget: usize,
}

impl Search<'_> {
    fn remaining(&self) -> usize {
        self.budget - self.sequence.len()
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let cap = self.family.cap();
        x.iter().map(|v| v.clamp(-cap, cap)).collect()
    }

    /// Evaluates projected points and returns their scores, `-inf` for
    /// contracts the agent would refuse.
    fn evaluate(&mut self, points: &[Vec<f64>], stage: SearchStage) -> Result<Vec<f64>> {
        let contracts: Vec<Contract> = points.iter().map(|x| self.family.contract_from(x)).collect();
        let evals = self.evaluator.evaluate_all(&contracts)?;
        let mut scores = Vec::with_capacity(points.len());
        for (contract, eval) in contracts.into_iter().zip(&evals) {
            let coefficients = self.family.coefficients_of(&contract);
            self.sequence.push(stage, coefficients, contract, eval);
            scores.push(if eval.participates { eval.principal_value.mean } else { f64::NEG_INFINITY });
        }
        Ok(scores)
    }

    fn evaluate_one(&mut self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(&[x.to_vec()], SearchStage::Refinement)?[0])
    }
}

/// Latin-hypercube sample of `n` points in `[-cap, cap]^d`.
fn latin_hypercube(n: usize, d: usize, cap: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = task_rng(seed, 0x5c9e);
    let columns: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(&mut rng);
            strata
                .into_iter()
                .map(|k| -cap + 2.0 * cap * (k as f64 + rng.random::<f64>()) / n as f64)
                .collect()
        })
        .collect();
    (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect()
}

/// Screening in parallel over a Latin hypercube, then sequential Nelder-Mead
/// from the best screened point. Every proposal is projected onto the
/// coefficient box before evaluation.
pub fn optimize_with(
    family: &FamilySpec,
    params: &ModelParams,
    options: &SearchOptions,
) -> Result<(Contract, MaximizingSequence)> {
    family.validate()?;
    let params = params.clone().validate()?;
    if options.budget == 0 {
        return Err(Error::InvalidParams("budget must be at least 1".into()));
    }
    let d = family.dimension();
    let cap = family.cap();
    let screening = ((options.budget as f64 * options.screening_fraction).round() as usize).clamp(1, options.budget);
    let mut search = Search {
        family,
        evaluator: Evaluator { params: &params, options: &options.agent, cache: BTreeMap::new() },
        sequence: MaximizingSequence::default(),
        budget: options.budget,
    };

    let points = latin_hypercube(screening, d, cap, params.seed);
    let scores = search.evaluate(&points, SearchStage::Screening)?;
    let start = if scores.iter().any(|s| s.is_finite()) {
        (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b })
    } else {
        // Closest to participating.
        let margin = |i: usize| search.sequence.records[i].agent_value.mean;
        (0..scores.len()).fold(0, |b, i| if margin(i) > margin(b) { i } else { b })
    };
    let x0 = search.project(&points[start]);
    nelder_mead(&mut search, x0, scores[start], 2.0 * cap / screening as f64)?;

    let sequence = search.sequence;
    match sequence.incumbent() {
        Some(r) => Ok((r.contract.clone(), sequence)),
        None => match feasibility_seed_with(&params, family, &options.agent) {
            Ok(fallback) => Err(Error::NoFeasibleContract { fallback: Box::new(fallback) }),
            Err(e) => Err(e),
        },
    }
}

fn nelder_mead(search: &mut Search, x0: Vec<f64>, f0: f64, step: f64) -> Result<()> {
    let d = x0.len();
    let cap = search.family.cap();
    let mut simplex = vec![(x0.clone(), f0)];
    for i in 0..d {
        if search.remaining() == 0 {
            return Ok(());
        }
        let mut x = x0.clone();
        x[i] += if x0[i] + step <= cap { step } else { -step };
        let x = search.project(&x);
        let f = search.evaluate_one(&x)?;
        simplex.push((x, f));
    }
    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    while search.remaining() > 0 {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let best = simplex[0].clone();
        let diameter = simplex.iter().map(|(x, _)| distance(x, &best.0)).fold(0.0, f64::max);
        if diameter <= 1e-12 * (1.0 + cap) {
            break;
        }
        let (worst, f_worst) = simplex[d].clone();
        let f_second = simplex[d - 1].1;
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / d as f64;
            }
        }
        let xr = search.project(&combine(&centroid, &worst, -1.0));
        let fr = search.evaluate_one(&xr)?;
        if fr > best.1 {
            if search.remaining() > 0 {
                let xe = search.project(&combine(&centroid, &worst, -2.0));
                let fe = search.evaluate_one(&xe)?;
                simplex[d] = if fe > fr { (xe, fe) } else { (xr, fr) };
            } else {
                simplex[d] = (xr, fr);
            }
            continue;
        }
        if fr > f_second {
            simplex[d] = (xr, fr);
            continue;
        }
        if search.remaining() == 0 {
            break;
        }
        let outside = fr > f_worst;
        let xc = if outside { combine(&centroid, &xr, 0.5) } else { combine(&centroid, &worst, 0.5) };
        let xc = search.project(&xc);
        let fc = search.evaluate_one(&xc)?;
        if (outside && fc >= fr) || (!outside && fc > f_worst) {
            simplex[d] = (xc, fc);
            continue;
        }
        for k in 1..=d {
            if search.remaining() == 0 {
                return Ok(());
            }
            let x = search.project(&combine(&best.0, &simplex[k].0, 0.5));
            let f = search.evaluate_one(&x)?;
            simplex[k] = (x, f);
        }
    }
    Ok(())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// Number of times the incumbent changed.
    pub incumbent_updates: usize,
    /// Largest distance between incumbents over the last quarter of updates.
    pub cauchy_tail: f64,
    /// Gains in `J_p` at successive incumbent updates.
    pub increments: Vec<f64>,
    /// Always true: the coefficient box is compact.
    pub has_convergent_subsequence: bool,
    pub limit_point: Vec<f64>,
    pub limit_value: Option<f64>,
}

/// Diagnostics on the incumbent trajectory. Without any participating
/// record the raw evaluation sequence is used instead.
pub fn convergence_report(sequence: &MaximizingSequence) -> Result<ConvergenceReport> {
    if sequence.len() < 2 {
        return Err(Error::SequenceTooShort(sequence.len()));
    }
    let mut updates: Vec<(Vec<f64>, f64)> = Vec::new();
    for r in &sequence.records {
        if let (Some(inc), Some(best)) = (&r.incumbent, r.best_value) {
            if updates.last().is_none_or(|(_, b)| *b != best) {
                updates.push((inc.clone(), best));
            }
        }
    }
    let limit_value = updates.last().map(|(_, v)| *v);
    let points: Vec<Vec<f64>> = if updates.is_empty() {
        sequence.records.iter().map(|r| r.coefficients.clone()).collect()
    } else {
        updates.iter().map(|(x, _)| x.clone()).collect()
    };
    let tail = &points[points.len() - points.len().div_ceil(4)..];
    let mut cauchy_tail = 0.0f64;
    for (i, a) in tail.iter().enumerate() {
        for b in &tail[i + 1..] {
            cauchy_tail = cauchy_tail.max(distance(a, b));
        }
    }
    Ok(ConvergenceReport {
        incumbent_updates: updates.len(),
        cauchy_tail,
        increments: updates.windows(2).map(|w| w[1].1 - w[0].1).collect(),
        has_convergent_subsequence: true,
        limit_point: points.last().expect("nonempty").clone(),
        limit_value,
    })
}
