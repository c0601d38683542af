use thiserror::Error;

use crate::contracts::Contract;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("CFL condition violated: time step {actual:.3e} exceeds the stable maximum {required_max:.3e}")]
    Cfl { actual: f64, required_max: f64 },

    #[error("contract not supported by this solver: {0}")]
    UnsupportedContract(String),

    #[error("scenario tree too large: {atoms} atoms (limit {limit})")]
    TreeTooLarge { atoms: u64, limit: u64 },

    #[error("constraint set is infeasible: {0}")]
    Infeasible(String),

    #[error("dual ascent did not converge after {iterations} iterations (KKT residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("contract cap K = {cap} is below the required constant {required:.6}; need K >= {required:.6}")]
    CapTooSmall { cap: f64, required: f64 },

    #[error("no participating contract found within the evaluation budget; feasibility seed is {fallback:?}")]
    NoFeasibleContract { fallback: Box<Contract> },

    #[error("sequence has {0} records; at least 2 are required")]
    SequenceTooShort(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("malformed path dump: {0}")]
    Dump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
