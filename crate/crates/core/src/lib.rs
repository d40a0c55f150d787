//! Hierarchically regularized Cox proportional-hazards models for
//! collections of survival studies.
//!
//! Each study `k` gets its own coefficient vector `beta_k`; a latent shared
//! vector `beta_0` is penalized by an elastic net, and the deviations
//! `beta_k - beta_0` are shrunk together with a similarity-weighted norm so
//! that similar studies borrow more strength from each other.

pub mod admm;
pub mod baselines;
pub mod error;
pub mod optim;
pub mod penalties;
pub mod selection;
pub mod similarity;
pub mod simulate;
pub mod survival;
pub mod transform;

pub use admm::{ConvergenceReport, SolverOptions, SolverState};
pub use error::{Error, Result};
pub use penalties::{CoefficientBundle, FusionExponent, PenaltyConfig, SimilarityMatrix};
pub use survival::{concordance, CoxStudy, EventTable, StudyData};
