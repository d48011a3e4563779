//! Ordered (non-colliding) random walks: exact lattice kernels, Monte Carlo
//! estimation of the regular function `V`, the Doob transform and its limit
//! laws.

pub mod asymptotics;
pub mod distributions;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod lattice_exact;
pub mod scalar;
pub mod transform;
pub mod vfunc;

pub use distributions::{make_distribution, DistSpec, RandomStream, StepDistribution, StepKind};
pub use engine::{EstimateCI, StoppedOutcome, WalkConfig};
pub use error::{Error, Result};
pub use geometry::Configuration;
pub use lattice_exact::{ExactKernel, VerificationReport};
pub use scalar::{Rational, Real, Scalar};

/// Floating point configuration used by the samplers.
pub type Config = Configuration<f64>;
/// Single precision configuration.
pub type Config32 = Configuration<f32>;
/// Integer configuration on a lattice.
pub type LatticeConfig = Configuration<i64>;
/// Exact rational configuration.
pub type ExactConfig = Configuration<Rational>;
