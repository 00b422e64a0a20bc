//! Simulation and validation engine for slow/fast McKean–Vlasov diffusions
//! and their homogenized limits.

pub mod dynamics;
pub mod error;
pub mod harness;
pub mod homogenize;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod poisson;
pub mod rng;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use measure::Ensemble;
pub use model::{builtin_langevin_model, builtin_linear_model, validate_model, ModelSpec};
pub use scalar::Real;
pub use stats::Estimate;

pub type Ensemble32 = Ensemble<f32>;
pub type Ensemble64 = Ensemble<f64>;
pub type ModelSpec32 = ModelSpec<f32>;
pub type ModelSpec64 = ModelSpec<f64>;
pub type PoissonEvaluator32 = poisson::PoissonEvaluator<f32>;
pub type PoissonEvaluator64 = poisson::PoissonEvaluator<f64>;
pub type HomogenizedModel32 = homogenize::HomogenizedModel<f32>;
pub type HomogenizedModel64 = homogenize::HomogenizedModel<f64>;
