use thiserror::Error;

/// Errors raised across the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical blow-up at step {step}: {what}")]
    NumericalBlowup { step: usize, what: String },

    #[error("invalid system response: residual {residual:.3e} exceeds tolerance")]
    InvalidResponse { residual: f64 },

    #[error("invalid weight matrix: {0}")]
    InvalidWeight(String),

    #[error("error tube diverged at step {step}")]
    TubeDivergence { step: usize },

    #[error("evaluator returned a non-finite value at {point:?}")]
    EvaluatorFailure { point: Vec<f64> },

    #[error("profiles differ in agent {agent}, which is not the deviating agent")]
    InvalidDeviation { agent: usize },

    #[error("best response of agent {agent} is infeasible (worst margin {worst_margin:.3e})")]
    BestResponseInfeasible { agent: String, worst_margin: f64 },

    #[error("final sweep left agent {agent} infeasible (worst margin {worst_margin:.3e})")]
    RcneInfeasible { agent: String, worst_margin: f64 },

    #[error("rollout blew up at step {step}")]
    RolloutBlowup { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("solution was computed for config {found}, current config is {expected}")]
    StaleSolution { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::InvalidWeight(_) => 2,
            Error::RcneInfeasible { .. } | Error::BestResponseInfeasible { .. } => 3,
            Error::StaleSolution { .. } => 4,
            _ => 1,
        }
    }
}
