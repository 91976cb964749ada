//! Closed-form throughput and latency models, the intra-request knob
//! optimizer and the inter-request path LP.

mod compose;
mod inter;
mod intra;
mod lp;

use thiserror::Error;

use crate::config::{expected_gamma, AcceptanceModel, ConfigError};

pub use compose::{composed_accept_length, composed_accept_length_with, aux_gamma};
pub use inter::{
    optimize_inter, optimize_inter_fixed_point, path_costs, Capacities, FixedPointSolution, LpSolution, Path,
    PathCost, PathParams, ResourceCost, Constraint,
};
pub use intra::{
    baseline_throughput, intra_throughput, kv_avg, optimize_intra, t_iter_staggered, t_req_remote, t_tok,
    Infeasible, IntraEval, IntraGrid, IntraKnobs, IntraOptimum, IntraParams,
};
pub use lp::{simplex_max, LpError, LpOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no feasible knob setting in the grid")]
    NoFeasiblePoint,
    #[error("linear program is unbounded along path {0}")]
    Unbounded(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Source of `γ(x, c)` for the analytical models.
pub trait AcceptanceCurve {
    fn gamma(&self, x: u32, c: f64) -> Result<f64, ConfigError>;
}

impl AcceptanceCurve for AcceptanceModel {
    fn gamma(&self, x: u32, c: f64) -> Result<f64, ConfigError> {
        expected_gamma(self, x, c)
    }
}

impl<F: Fn(u32, f64) -> f64> AcceptanceCurve for F {
    fn gamma(&self, x: u32, c: f64) -> Result<f64, ConfigError> {
        Ok(self(x, c))
    }
}
