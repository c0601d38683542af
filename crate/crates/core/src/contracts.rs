//! Compact parametric fee families.
//!
//! Every contract reads only the observable `(P, Z)` coordinates of a path.
//! Three classes are provided: constants, polynomials in a bounded linear
//! functional of `P` and `Z`, and Hölder tables sampled at a finite set of
//! times.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::girsanov::map_controlled_paths;
use crate::model::{DiscretizedPath, ModelParams};
use crate::policy::{ConstantRate, UniformAxis};
use crate::rng::task_rng;
use crate::stats::pairwise_sum;

/// Bounded linear functional applied to the price and inventory paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathOperator {
    /// Value at the horizon.
    Terminal,
    /// `(1/T) int_0^T x dt`, left-point rule on the path grid.
    TimeAverage,
}

impl PathOperator {
    pub fn apply(self, samples: &[f64], dt: f64) -> f64 {
        match self {
            PathOperator::Terminal => *samples.last().expect("nonempty path"),
            PathOperator::TimeAverage => {
                let n = samples.len() - 1;
                let integral: f64 = samples[..n].iter().sum::<f64>() * dt;
                integral / (n as f64 * dt)
            }
        }
    }
}

/// Contract table over `(P, Z)` nodes, read at `sample_times` and averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzTable {
    pub sample_times: Vec<f64>,
    pub p_axis: UniformAxis,
    pub z_axis: UniformAxis,
    /// Node values, `P`-major.
    pub values: Vec<f64>,
    pub exponent: f64,
    pub modulus: f64,
    pub cap: f64,
}

impl LipschitzTable {
    pub fn node_value(&self, ip: usize, iz: usize) -> f64 {
        self.values[ip * self.z_axis.count + iz]
    }

    /// Bilinear interpolation; points outside the table are moved to its edge.
    pub fn bilinear(&self, p: f64, z: f64) -> f64 {
        let (ip, fp) = self.p_axis.locate(p);
        let (iz, fz) = self.z_axis.locate(z);
        let v00 = self.node_value(ip, iz);
        let v01 = self.node_value(ip, iz + 1);
        let v10 = self.node_value(ip + 1, iz);
        let v11 = self.node_value(ip + 1, iz + 1);
        (1.0 - fp) * ((1.0 - fz) * v00 + fz * v01) + fp * ((1.0 - fz) * v10 + fz * v11)
    }

    fn node_distance(&self, a: usize, b: usize) -> f64 {
        let nz = self.z_axis.count;
        let dp = self.p_axis.node(a / nz) - self.p_axis.node(b / nz);
        let dz = self.z_axis.node(a % nz) - self.z_axis.node(b % nz);
        dp.abs().max(dz.abs())
    }

    /// Largest `|v_a - v_b| / d(a, b)^gamma` over all node pairs.
    pub fn node_holder_ratio(&self) -> f64 {
        let n = self.values.len();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in (a + 1)..n {
                let d = self.node_distance(a, b).powf(self.exponent);
                worst = worst.max((self.values[a] - self.values[b]).abs() / d);
            }
        }
        worst
    }

    /// Replaces node values by the upper Hölder envelope
    /// `min_b (v_b + M d(a, b)^gamma)`, which satisfies the bound on nodes and
    /// leaves already-compliant tables unchanged.
    pub fn enforce_holder(&mut self) {
        let n = self.values.len();
        let original = self.values.clone();
        for a in 0..n {
            let mut env = original[a];
            for (b, vb) in original.iter().enumerate() {
                if a != b {
                    env = env.min(vb + self.modulus * self.node_distance(a, b).powf(self.exponent));
                }
            }
            self.values[a] = env;
        }
    }
}

/// A fee paid by the agent to the principal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Contract {
    Constant {
        value: f64,
        cap: f64,
    },
    /// `sum_{i,j=0..=n} a_ij (L P)^i (L Z)^j`.
    LinearPolynomial {
        degree: usize,
        cap: f64,
        operator: PathOperator,
        /// `coefficients[i][j]` multiplies `(L P)^i (L Z)^j`.
        coefficients: Vec<Vec<f64>>,
    },
    LipschitzTable(LipschitzTable),
}

impl Contract {
    /// Constant fee with no cap.
    pub fn constant(value: f64) -> Self {
        Contract::Constant { value, cap: f64::MAX }
    }

    /// Polynomial with all coefficients zero.
    pub fn zero_polynomial(degree: usize, cap: f64, operator: PathOperator) -> Self {
        Contract::LinearPolynomial {
            degree,
            cap,
            operator,
            coefficients: vec![vec![0.0; degree + 1]; degree + 1],
        }
    }

    /// `a * Z_T`.
    pub fn linear_inventory(a: f64) -> Self {
        let mut c = Self::zero_polynomial(1, f64::MAX, PathOperator::Terminal);
        if let Contract::LinearPolynomial { coefficients, .. } = &mut c {
            coefficients[0][1] = a;
        }
        c
    }

    pub fn evaluate(&self, path: &DiscretizedPath) -> f64 {
        match self {
            Contract::Constant { value, .. } => *value,
            Contract::LinearPolynomial { operator, coefficients, .. } => {
                let dt = path.dt();
                let lp = operator.apply(&path.p, dt);
                let lz = operator.apply(&path.z, dt);
                polynomial_value(coefficients, lp, lz)
            }
            Contract::LipschitzTable(table) => {
                let dt = path.dt();
                let n = path.n_steps();
                let mut acc = 0.0;
                for &t in &table.sample_times {
                    let i = ((t / dt).round() as usize).min(n);
                    acc += table.bilinear(path.p[i], path.z[i]);
                }
                (acc / table.sample_times.len() as f64).clamp(-table.cap, table.cap)
            }
        }
    }

    /// Componentwise clamp of all parameters to `[-K, K]`.
    pub fn project_to_box(&self) -> Self {
        match self {
            Contract::Constant { value, cap } => Contract::Constant { value: value.clamp(-cap, *cap), cap: *cap },
            Contract::LinearPolynomial { degree, cap, operator, coefficients } => Contract::LinearPolynomial {
                degree: *degree,
                cap: *cap,
                operator: *operator,
                coefficients: coefficients
                    .iter()
                    .map(|row| row.iter().map(|a| a.clamp(-cap, *cap)).collect())
                    .collect(),
            },
            Contract::LipschitzTable(t) => {
                let mut t = t.clone();
                for v in &mut t.values {
                    *v = v.clamp(-t.cap, t.cap);
                }
                Contract::LipschitzTable(t)
            }
        }
    }

    /// Whether the contract is a constant fee (possibly written as a polynomial).
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Contract::Constant { value, .. } => Some(*value),
            Contract::LinearPolynomial { coefficients, .. } => {
                let rest = coefficients
                    .iter()
                    .enumerate()
                    .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, a)| (i, j, *a)))
                    .all(|(i, j, a)| (i == 0 && j == 0) || a == 0.0);
                rest.then(|| coefficients[0][0])
            }
            Contract::LipschitzTable(t) => {
                let first = t.values[0];
                t.values.iter().all(|v| *v == first).then(|| first.clamp(-t.cap, t.cap))
            }
        }
    }

    /// Upper bound on `|xi|` over all paths, if one exists.
    pub fn sup_bound(&self) -> Option<f64> {
        match self {
            Contract::Constant { value, .. } => Some(value.abs()),
            Contract::LipschitzTable(t) => Some(t.cap.min(t.values.iter().fold(0.0, |m, v| m.max(v.abs())))),
            Contract::LinearPolynomial { coefficients, .. } => {
                let lower_only = coefficients
                    .iter()
                    .enumerate()
                    .all(|(i, row)| row.iter().enumerate().all(|(j, a)| (i == 0 && j == 0) || *a == 0.0));
                lower_only.then(|| coefficients[0][0].abs())
            }
        }
    }

    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("contract serializes")
    }

    pub fn from_record(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn polynomial_value(coefficients: &[Vec<f64>], lp: f64, lz: f64) -> f64 {
    let mut total = 0.0;
    let mut pp = 1.0;
    for row in coefficients {
        let mut zp = 1.0;
        for a in row {
            total += a * pp * zp;
            zp *= lz;
        }
        pp *= lp;
    }
    total
}

/// Which polynomial coefficients are free parameters of the family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolynomialTerms {
    /// Every `a_ij` with `0 <= i, j <= n`.
    #[default]
    All,
    /// Only the mixed terms `1 <= i, j <= n`.
    Mixed,
}

/// A compact contract family together with its coefficient box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Constants {
        cap: f64,
    },
    Polynomial {
        degree: usize,
        cap: f64,
        operator: PathOperator,
        #[serde(default)]
        terms: PolynomialTerms,
    },
    LipschitzTable {
        sample_times: Vec<f64>,
        p_axis: UniformAxis,
        z_axis: UniformAxis,
        exponent: f64,
        modulus: f64,
        cap: f64,
    },
}

impl FamilySpec {
    pub fn cap(&self) -> f64 {
        match self {
            FamilySpec::Constants { cap }
            | FamilySpec::Polynomial { cap, .. }
            | FamilySpec::LipschitzTable { cap, .. } => *cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cap = self.cap();
        if !(cap.is_finite() && cap > 0.0) {
            return Err(Error::Config("family cap must be positive and finite".into()));
        }
        match self {
            FamilySpec::Constants { .. } => Ok(()),
            FamilySpec::Polynomial { degree, .. } => {
                if *degree == 0 || *degree > 4 {
                    Err(Error::Config("polynomial degree must be in 1..=4".into()))
                } else {
                    Ok(())
                }
            }
            FamilySpec::LipschitzTable { sample_times, exponent, modulus, .. } => {
                if sample_times.is_empty() {
                    return Err(Error::Config("table needs at least one sample time".into()));
                }
                if !(*exponent > 0.0 && *exponent <= 1.0) {
                    return Err(Error::Config("Hölder exponent must lie in (0, 1]".into()));
                }
                if *modulus <= 0.0 {
                    return Err(Error::Config("Hölder modulus must be positive".into()));
                }
                Ok(())
            }
        }
    }

    fn free_terms(&self) -> Vec<(usize, usize)> {
        match self {
            FamilySpec::Polynomial { degree, terms, .. } => {
                let start = match terms {
                    PolynomialTerms::All => 0,
                    PolynomialTerms::Mixed => 1,
                };
                (start..=*degree).flat_map(|i| (start..=*degree).map(move |j| (i, j))).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Number of free coefficients.
    pub fn dimension(&self) -> usize {
        match self {
            FamilySpec::Constants { .. } => 1,
            FamilySpec::Polynomial { .. } => self.free_terms().len(),
            FamilySpec::LipschitzTable { p_axis, z_axis, .. } => p_axis.count * z_axis.count,
        }
    }

    /// Builds the contract for a coefficient vector, projected onto the box
    /// (and, for tables, onto the Hölder ball on nodes).
    pub fn contract_from(&self, coefficients: &[f64]) -> Contract {
        assert_eq!(coefficients.len(), self.dimension(), "coefficient vector has wrong length");
        match self {
            FamilySpec::Constants { cap } => Contract::Constant { value: coefficients[0], cap: *cap }.project_to_box(),
            FamilySpec::Polynomial { degree, cap, operator, .. } => {
                let mut table = vec![vec![0.0; degree + 1]; degree + 1];
                for ((i, j), a) in self.free_terms().into_iter().zip(coefficients) {
                    table[i][j] = *a;
                }
                Contract::LinearPolynomial { degree: *degree, cap: *cap, operator: *operator, coefficients: table }
                    .project_to_box()
            }
            FamilySpec::LipschitzTable { sample_times, p_axis, z_axis, exponent, modulus, cap } => {
                let mut t = LipschitzTable {
                    sample_times: sample_times.clone(),
                    p_axis: *p_axis,
                    z_axis: *z_axis,
                    values: coefficients.to_vec(),
                    exponent: *exponent,
                    modulus: *modulus,
                    cap: *cap,
                };
                t.enforce_holder();
                Contract::LipschitzTable(t).project_to_box()
            }
        }
    }

    /// Inverse of [`FamilySpec::contract_from`] for contracts of this family.
    pub fn coefficients_of(&self, contract: &Contract) -> Vec<f64> {
        match (self, contract) {
            (FamilySpec::Constants { .. }, Contract::Constant { value, .. }) => vec![*value],
            (FamilySpec::Polynomial { .. }, Contract::LinearPolynomial { coefficients, .. }) => {
                self.free_terms().into_iter().map(|(i, j)| coefficients[i][j]).collect()
            }
            (FamilySpec::LipschitzTable { .. }, Contract::LipschitzTable(t)) => t.values.clone(),
            _ => panic!("contract does not belong to this family"),
        }
    }

    /// The family member paying the constant `c`, if the family has constants.
    pub fn constant(&self, c: f64) -> Option<Contract> {
        match self {
            FamilySpec::Constants { .. } => Some(self.contract_from(&[c])),
            FamilySpec::Polynomial { terms: PolynomialTerms::Mixed, .. } => None,
            FamilySpec::Polynomial { .. } => {
                let mut coef = vec![0.0; self.dimension()];
                coef[0] = c;
                Some(self.contract_from(&coef))
            }
            FamilySpec::LipschitzTable { .. } => Some(self.contract_from(&vec![c; self.dimension()])),
        }
    }
}

/// Result of a sampled Hölder membership check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderAudit {
    pub max_ratio: f64,
    pub modulus: f64,
    pub within_modulus: bool,
}

/// Largest observed `|xi(x) - xi(y)| / ||x - y||^gamma` over node probes and
/// sampled path pairs (sup-norm over the observable coordinates).
///
/// Node probes are pairs of paths that sit on two table nodes at every
/// sample time; sampled pairs mix independent reference paths with small
/// perturbations of a single path.
pub fn holder_audit(table: &LipschitzTable, params: &ModelParams, count: usize, seed: u64) -> HolderAudit {
    let contract = Contract::LipschitzTable(table.clone());
    let gamma = table.exponent;
    let mut worst: f64 = 0.0;
    let mut record = |x: &DiscretizedPath, y: &DiscretizedPath| {
        let d = x.observable_distance(y);
        if d > 0.0 {
            let ratio = (contract.evaluate(x) - contract.evaluate(y)).abs() / d.powf(gamma);
            worst = worst.max(ratio);
        }
    };

    let nz = table.z_axis.count;
    let n_nodes = table.p_axis.count * nz;
    let node_path = |k: usize| {
        let mut path = DiscretizedPath::zeros(params.horizon, params.n_steps);
        path.p.fill(table.p_axis.node(k / nz));
        path.z.fill(table.z_axis.node(k % nz));
        path
    };
    for a in 0..n_nodes {
        for b in (a + 1)..n_nodes {
            record(&node_path(a), &node_path(b));
        }
    }

    let mut rng = task_rng(seed, 0x401D);
    let paths = crate::girsanov::simulate_reference(params, 2 * count.max(1), seed).paths;
    for k in 0..count {
        let x = &paths[2 * k];
        if k % 2 == 0 {
            record(x, &paths[2 * k + 1]);
        } else {
            let scale = 10f64.powf(rng.random_range(-3.0..0.0));
            let mut y = x.clone();
            for i in 0..y.p.len() {
                y.p[i] += scale * rng.random_range(-1.0..1.0);
                y.z[i] += scale * rng.random_range(-1.0..1.0);
            }
            record(x, &y);
        }
    }
    HolderAudit { max_ratio: worst, modulus: table.modulus, within_modulus: worst <= table.modulus * (1.0 + 1e-9) }
}

/// Per-level estimate of `sup E^{Q^pi}[|xi| 1{|xi| >= level}]` over the
/// contract sample and the extreme constant rates `{L, 0, U}`.
pub fn tail_expectation_audit(
    family: &[Contract],
    params: &ModelParams,
    levels: &[f64],
    count: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    let policies = [params.rate_lower, 0.0, params.rate_upper];
    let mut sup = vec![0.0f64; levels.len()];
    for policy in policies {
        let fees: Vec<Vec<f64>> = map_controlled_paths(params, &ConstantRate(policy), count, seed, |cp| {
            family.iter().map(|c| c.evaluate(&cp.path).abs()).collect()
        });
        for (ci, _) in family.iter().enumerate() {
            for (li, level) in levels.iter().enumerate() {
                let tail: Vec<f64> =
                    fees.iter().map(|f| if f[ci] >= *level { f[ci] } else { 0.0 }).collect();
                let mean = pairwise_sum(&tail) / tail.len() as f64;
                sup[li] = sup[li].max(mean);
            }
        }
    }
    levels.iter().copied().zip(sup).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path_with(p_t: f64, z_t: f64) -> DiscretizedPath {
        let mut path = DiscretizedPath::zeros(1.0, 4);
        *path.p.last_mut().unwrap() = p_t;
        *path.z.last_mut().unwrap() = z_t;
        path
    }

    fn clamp_price_table(cap: f64) -> LipschitzTable {
        let p_axis = UniformAxis::symmetric(3.0, 6);
        let z_axis = UniformAxis::symmetric(1.0, 2);
        let mut values = Vec::new();
        for ip in 0..p_axis.count {
            for _ in 0..z_axis.count {
                values.push(p_axis.node(ip).clamp(-cap, cap));
            }
        }
        LipschitzTable {
            sample_times: vec![1.0],
            p_axis,
            z_axis,
            values,
            exponent: 1.0,
            modulus: 1.0,
            cap,
        }
    }

    #[test]
    fn constant_evaluates_to_itself() {
        assert_eq!(Contract::constant(3.0).evaluate(&path_with(0.7, -1.0)), 3.0);
    }

    #[test]
    fn polynomial_terminal_example() {
        let mut c = Contract::zero_polynomial(1, 10.0, PathOperator::Terminal);
        if let Contract::LinearPolynomial { coefficients, .. } = &mut c {
            coefficients[1][1] = 2.0;
        }
        assert_eq!(c.evaluate(&path_with(1.0, 0.5)), 1.0);
    }

    #[test]
    fn time_average_uses_left_points() {
        let mut c = Contract::zero_polynomial(1, 10.0, PathOperator::TimeAverage);
        if let Contract::LinearPolynomial { coefficients, .. } = &mut c {
            coefficients[0][1] = 1.0;
        }
        let mut path = DiscretizedPath::zeros(1.0, 4);
        path.z = vec![0.0, 1.0, 2.0, 3.0, 100.0];
        assert!((c.evaluate(&path) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let family = FamilySpec::Polynomial {
            degree: 1,
            cap: 2.0,
            operator: PathOperator::Terminal,
            terms: PolynomialTerms::All,
        };
        let raw = Contract::LinearPolynomial {
            degree: 1,
            cap: 2.0,
            operator: PathOperator::Terminal,
            coefficients: vec![vec![7.0, 0.5], vec![-1.0, -9.0]],
        };
        let once = raw.project_to_box();
        assert_eq!(family.coefficients_of(&once), vec![2.0, 0.5, -1.0, -2.0]);
        assert_eq!(once.project_to_box(), once);
    }

    #[test]
    fn record_round_trip() {
        let contracts = vec![
            Contract::constant(0.25),
            Contract::linear_inventory(-0.3),
            Contract::LipschitzTable(clamp_price_table(2.0)),
        ];
        for c in contracts {
            assert_eq!(Contract::from_record(&c.to_record()).unwrap(), c);
        }
    }

    #[test]
    fn holder_audit_examples() {
        let params = ModelParams { n_steps: 20, ..ModelParams::default() };
        let flat = LipschitzTable { values: vec![0.4; 21], ..clamp_price_table(2.0) };
        assert_eq!(holder_audit(&flat, &params, 50, 1).max_ratio, 0.0);

        let lipschitz = clamp_price_table(2.0);
        let audit = holder_audit(&lipschitz, &params, 200, 2);
        assert!(audit.within_modulus && audit.max_ratio <= 1.0 + 1e-12, "{audit:?}");

        let mut broken = clamp_price_table(2.0);
        broken.values[10] += 1.5;
        let audit = holder_audit(&broken, &params, 20, 3);
        assert!(!audit.within_modulus, "{audit:?}");
    }

    #[test]
    fn holder_envelope_repairs_violations() {
        let mut t = clamp_price_table(2.0);
        t.values[10] += 1.5;
        assert!(t.node_holder_ratio() > t.modulus);
        t.enforce_holder();
        assert!(t.node_holder_ratio() <= t.modulus + 1e-12);
        let good = clamp_price_table(2.0);
        let mut again = good.clone();
        again.enforce_holder();
        assert_eq!(again, good);
    }

    #[test]
    fn tail_audit_examples() {
        let params = ModelParams { n_steps: 10, rate_lower: -1.0, rate_upper: 1.0, ..ModelParams::default() };
        let family = vec![Contract::constant(2.0), Contract::constant(-0.5)];
        let report = tail_expectation_audit(&family, &params, &[0.1, 1.0, 2.5], 50, 4);
        assert_eq!(report[0].1, 2.0);
        assert_eq!(report[2].1, 0.0);

        let poly = FamilySpec::Polynomial {
            degree: 1,
            cap: 1.0,
            operator: PathOperator::Terminal,
            terms: PolynomialTerms::All,
        };
        let sample: Vec<Contract> =
            (0..4).map(|k| poly.contract_from(&[0.1 * k as f64, 0.5, -0.5, 1.0])).collect();
        let levels = [0.0, 0.5, 1.0, 2.0, 4.0];
        let report = tail_expectation_audit(&sample, &params, &levels, 200, 5);
        assert!(report.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    proptest! {
        #[test]
        fn evaluation_ignores_signal(
            coef in prop::collection::vec(-2.0f64..2.0, 9),
            wshift in prop::collection::vec(-5.0f64..5.0, 5),
            average in any::<bool>(),
        ) {
            let op = if average { PathOperator::TimeAverage } else { PathOperator::Terminal };
            let family = FamilySpec::Polynomial { degree: 2, cap: 2.0, operator: op, terms: PolynomialTerms::All };
            let c = family.contract_from(&coef);
            let mut a = DiscretizedPath::zeros(1.0, 4);
            a.p = vec![0.0, 0.3, -0.2, 0.5, 1.1];
            a.z = vec![0.0, -0.1, 0.4, 0.2, -0.6];
            let mut b = a.clone();
            b.w = wshift;
            prop_assert_eq!(c.evaluate(&a), c.evaluate(&b));
            let table = Contract::LipschitzTable(clamp_price_table(1.5));
            prop_assert_eq!(table.evaluate(&a), table.evaluate(&b));
        }

        #[test]
        fn family_members_stay_in_box(coef in prop::collection::vec(-10.0f64..10.0, 4)) {
            let family = FamilySpec::Polynomial {
                degree: 1, cap: 3.0, operator: PathOperator::Terminal, terms: PolynomialTerms::All,
            };
            let c = family.contract_from(&coef);
            prop_assert!(family.coefficients_of(&c).iter().all(|a| a.abs() <= 3.0));
            prop_assert_eq!(c.project_to_box(), c);
        }

        #[test]
        fn polynomial_is_lipschitz_on_bounded_paths(
            coef in prop::collection::vec(-1.0f64..1.0, 4),
            x in prop::collection::vec(-1.0f64..1.0, 2),
            y in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            // On |LP|, |LZ| <= R the degree-1 polynomial has Lipschitz
            // constant (|a10| + |a01| + 2 R |a11|) in the sup-norm.
            let family = FamilySpec::Polynomial {
                degree: 1, cap: 1.0, operator: PathOperator::Terminal, terms: PolynomialTerms::All,
            };
            let c = family.contract_from(&coef);
            let lip = coef[2].abs() + coef[1].abs() + 2.0 * coef[3].abs();
            let (a, b) = (path_with(x[0], x[1]), path_with(y[0], y[1]));
            let d = a.observable_distance(&b);
            prop_assert!((c.evaluate(&a) - c.evaluate(&b)).abs() <= lip * d + 1e-12);
        }
    }
}
