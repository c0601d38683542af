//! Model parameters, sampled paths and the linear constraint embedding of
//! the brokerage model.
//!
//! The state is `X = (P, Z, W)`: price, inventory and the client's private
//! signal. Under the reference measure `P = sigma * B1`, `Z = epsilon * B2`,
//! `W = B3`. A trading rate `pi` moves the drift of the state to
//! `nu = (W, pi, 0)`, and admissibility is the six-row inequality
//! `b + A nu <= 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Price volatility.
    pub sigma: f64,
    /// Inventory noise.
    pub epsilon: f64,
    /// Agent's quadratic penalty on the trading rate.
    pub phi_a: f64,
    /// Principal's quadratic penalty on the trading rate.
    pub phi_p: f64,
    pub rate_lower: f64,
    pub rate_upper: f64,
    pub horizon: f64,
    /// Agent's reservation utility.
    pub reservation: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            epsilon: 0.5,
            phi_a: 0.5,
            phi_p: 0.25,
            rate_lower: -10.0,
            rate_upper: 10.0,
            horizon: 1.0,
            reservation: 0.0,
            n_steps: 250,
            n_paths: 10_000,
            seed: 20_240_601,
        }
    }
}

impl ModelParams {
    /// Checks every invariant in a fixed order and reports the first failure.
    pub fn validate(self) -> Result<Self> {
        let finite = [
            ("sigma", self.sigma),
            ("epsilon", self.epsilon),
            ("phi_a", self.phi_a),
            ("phi_p", self.phi_p),
            ("rate_lower", self.rate_lower),
            ("rate_upper", self.rate_upper),
            ("horizon", self.horizon),
            ("reservation", self.reservation),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::InvalidParams(format!("{name} must be finite")));
            }
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidParams("sigma must be positive".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidParams("epsilon must be positive".into()));
        }
        if self.phi_a <= 0.0 {
            return Err(Error::InvalidParams("phi_a must be positive".into()));
        }
        if self.phi_p < 0.0 {
            return Err(Error::InvalidParams("phi_p must be nonnegative".into()));
        }
        if self.horizon <= 0.0 {
            return Err(Error::InvalidParams("horizon must be positive".into()));
        }
        if self.rate_lower > self.rate_upper {
            return Err(Error::InvalidParams("rate_lower exceeds rate_upper".into()));
        }
        if self.n_steps < 1 {
            return Err(Error::InvalidParams("n_steps must be at least 1".into()));
        }
        if self.n_paths < 1 {
            return Err(Error::InvalidParams("n_paths must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn clamp_rate(&self, rate: f64) -> f64 {
        rate.clamp(self.rate_lower, self.rate_upper)
    }

    /// Entropy weight `2 epsilon^2 phi_a` multiplying `M log M` in the agent's utility.
    pub fn agent_entropy_weight(&self) -> f64 {
        2.0 * self.epsilon * self.epsilon * self.phi_a
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let params: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        params.validate()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat struct always serializes")
    }
}

/// One trajectory of `(P, Z, W)` on the uniform grid `t_i = i T / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedPath {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

impl DiscretizedPath {
    /// All-zero path on the grid with `n_steps` intervals.
    pub fn zeros(horizon: f64, n_steps: usize) -> Self {
        let dt = horizon / n_steps as f64;
        let times = (0..=n_steps).map(|i| i as f64 * dt).collect();
        Self {
            times,
            p: vec![0.0; n_steps + 1],
            z: vec![0.0; n_steps + 1],
            w: vec![0.0; n_steps + 1],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("grid has at least two points")
    }

    pub fn dt(&self) -> f64 {
        self.horizon() / self.n_steps() as f64
    }

    /// State seen by a feedback rule at grid index `i`, including left-point
    /// running integrals of `P` and `Z` up to `t_i`.
    pub fn state_at(&self, i: usize, int_p: f64, int_z: f64) -> PathState {
        PathState {
            t: self.times[i],
            p: self.p[i],
            z: self.z[i],
            w: self.w[i],
            int_p,
            int_z,
        }
    }

    /// Sup-norm of the difference over the observable `(P, Z)` coordinates.
    pub fn observable_distance(&self, other: &Self) -> f64 {
        let dp = self.p.iter().zip(&other.p).map(|(a, b)| (a - b).abs());
        let dz = self.z.iter().zip(&other.z).map(|(a, b)| (a - b).abs());
        dp.chain(dz).fold(0.0, f64::max)
    }
}

/// Everything a feedback trading rule may read at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathState {
    pub t: f64,
    pub p: f64,
    pub z: f64,
    pub w: f64,
    /// `int_0^t P ds` (left-point).
    pub int_p: f64,
    /// `int_0^t Z ds` (left-point).
    pub int_z: f64,
}

/// Number of rows in the constraint embedding.
pub const CONSTRAINT_ROWS: usize = 6;

/// The constant matrix `A` and state-dependent vector `b` embedding the
/// rate bounds `L <= pi <= U` and the fixed price/signal drifts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSpec {
    pub a_matrix: [[f64; 3]; CONSTRAINT_ROWS],
    pub rate_lower: f64,
    pub rate_upper: f64,
}

impl ConstraintSpec {
    pub fn new(params: &ModelParams) -> Self {
        Self::with_bounds(params.rate_lower, params.rate_upper)
    }

    pub fn with_bounds(rate_lower: f64, rate_upper: f64) -> Self {
        Self {
            a_matrix: [
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
            ],
            rate_lower,
            rate_upper,
        }
    }

    /// `b = (-W, W, 0, 0, -U, L)`.
    pub fn b_vector(&self, w: f64) -> [f64; CONSTRAINT_ROWS] {
        [-w, w, 0.0, 0.0, -self.rate_upper, self.rate_lower]
    }

    /// `b + A nu` for an arbitrary drift `nu = (nu_P, nu_Z, nu_W)`.
    pub fn residual(&self, w: f64, nu: [f64; 3]) -> [f64; CONSTRAINT_ROWS] {
        let b = self.b_vector(w);
        let mut out = [0.0; CONSTRAINT_ROWS];
        for (r, row) in self.a_matrix.iter().enumerate() {
            out[r] = b[r] + row[0] * nu[0] + row[1] * nu[1] + row[2] * nu[2];
        }
        out
    }

    /// Residuals at the model drift `nu = (W, pi, 0)`.
    pub fn constraint_rows(&self, state: &PathState, rate: f64) -> [f64; CONSTRAINT_ROWS] {
        self.residual(state.w, [state.w, rate, 0.0])
    }

    pub fn is_admissible(&self, state: &PathState, rate: f64) -> bool {
        self.constraint_rows(state, rate).iter().all(|r| *r <= 0.0)
    }

    /// Increment `b dt + A dX` of the constraint accumulator `Y` over one step,
    /// with `b` read at the left end point.
    pub fn accumulator_increment(&self, w_left: f64, dt: f64, dx: [f64; 3]) -> [f64; CONSTRAINT_ROWS] {
        let b = self.b_vector(w_left);
        let mut out = [0.0; CONSTRAINT_ROWS];
        for (r, row) in self.a_matrix.iter().enumerate() {
            out[r] = b[r] * dt + row[0] * dx[0] + row[1] * dx[1] + row[2] * dx[2];
        }
        out
    }
}

/// Girsanov density of a controlled measure along one reference path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathWeight {
    pub log_m: f64,
    pub m: f64,
    /// `int pi^2 dt`.
    pub int_rate_sq: f64,
    /// `int W^2 dt`.
    pub int_signal_sq: f64,
}

impl PathWeight {
    pub fn from_parts(log_m: f64, int_rate_sq: f64, int_signal_sq: f64) -> Self {
        Self { log_m, m: log_m.exp(), int_rate_sq, int_signal_sq }
    }

    pub fn unit() -> Self {
        Self::from_parts(0.0, 0.0, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> ModelParams {
        ModelParams {
            sigma: 1.0,
            epsilon: 0.5,
            phi_a: 0.5,
            phi_p: 0.25,
            rate_lower: -10.0,
            rate_upper: 10.0,
            horizon: 1.0,
            n_steps: 250,
            ..ModelParams::default()
        }
    }

    #[test]
    fn accepts_valid_parameters() {
        let p = reference();
        assert_eq!(p.clone().validate().unwrap(), p);
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let err = ModelParams { sigma: 0.0, ..reference() }.validate().unwrap_err();
        assert!(err.to_string().contains("sigma must be positive"), "{err}");
    }

    #[test]
    fn rejects_inverted_rate_bounds() {
        let err = ModelParams { rate_lower: 5.0, rate_upper: -5.0, ..reference() }
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("rate_lower exceeds rate_upper"), "{err}");
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let p = reference();
        let text = p.to_toml_string();
        assert_eq!(ModelParams::from_toml_str(&text).unwrap(), p);
        let bad = format!("{text}\nvolatility = 2.0\n");
        assert!(ModelParams::from_toml_str(&bad).is_err());
    }

    #[test]
    fn constraint_rows_examples() {
        let spec = ConstraintSpec::with_bounds(-10.0, 10.0);
        let state = PathState { w: 0.3, ..Default::default() };
        assert_eq!(spec.constraint_rows(&state, 2.0), [0.0, 0.0, 0.0, 0.0, -8.0, -12.0]);
        assert_eq!(spec.constraint_rows(&state, 10.0)[4], 0.0);
        let over = spec.constraint_rows(&state, 11.0);
        assert_eq!(over[4], 1.0);
        assert!(!spec.is_admissible(&state, 11.0));
    }

    #[test]
    fn zero_path_starts_at_origin() {
        let path = DiscretizedPath::zeros(2.0, 4);
        assert_eq!(path.times, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(path.dt(), 0.5);
    }

    proptest! {
        #[test]
        fn drift_rows_vanish_and_bounds_match(
            w in -50.0f64..50.0,
            rate in -20.0f64..20.0,
            lo in -10.0f64..0.0,
            width in 0.0f64..10.0,
        ) {
            let spec = ConstraintSpec::with_bounds(lo, lo + width);
            let state = PathState { w, ..Default::default() };
            let rows = spec.constraint_rows(&state, rate);
            for r in &rows[..4] {
                prop_assert_eq!(*r, 0.0);
            }
            let inside = rate >= lo && rate <= lo + width;
            prop_assert_eq!(spec.is_admissible(&state, rate), inside);
        }
    }
}
