//! Numerical toolkit for broker-client fee contracts under a signal-driven
//! market: Girsanov path weighting, agent best responses, relaxed-control
//! verification on scenario trees and principal-side contract search.

pub mod agent;
pub mod contracts;
pub mod experiment;
pub mod error;
pub mod girsanov;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod principal;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
