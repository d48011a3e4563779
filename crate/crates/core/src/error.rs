use thiserror::Error;

use crate::lattice_exact::VerificationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("step law has nonzero mean {mean}")]
    NonzeroMean { mean: String },

    #[error("step law has nonpositive variance {0}")]
    NonpositiveVariance(f64),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("{identity} violated at y={site:?}: lhs={lhs}, rhs={rhs}")]
    IdentityViolation {
        identity: String,
        site: Vec<i64>,
        lhs: String,
        rhs: String,
        report: Box<VerificationReport>,
    },

    #[error("only {collected} of {wanted} survivors after {attempts} attempts (acceptance {acceptance:.3e})")]
    PartialResult {
        collected: usize,
        wanted: usize,
        attempts: u64,
        acceptance: f64,
    },

    #[error("rejection sampling refused: predicted acceptance {predicted_acceptance:.3e} below {floor:.1e} (~{predicted_attempts:.3e} attempts needed)")]
    Infeasible {
        predicted_acceptance: f64,
        floor: f64,
        predicted_attempts: f64,
    },

    #[error("inconsistent transform table at {site:?}: one-step mass {mass} (budget {budget:.3e})")]
    Inconsistent { site: Vec<i64>, mass: f64, budget: f64 },

    #[error("fit failed: {0}")]
    Fit(String),
}

pub type Result<T> = std::result::Result<T, Error>;
