//! Filter-stability laboratory for finite-state hidden Markov models.
//!
//! Simulates continuous-time chains observed in Brownian noise (or without
//! noise), runs the Wonham filter from two priors, and measures how fast the
//! divergence between them decays. Poincaré constants, the backward map and
//! the statistical identities around them live in their own modules.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod divergence;
pub mod dual;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod io;
pub mod linalg;
pub mod model;
pub mod poincare;
pub mod sim;
pub mod verify;

pub use divergence::{DivergenceSeries, Divergences, Estimate, RateFit};
pub use dual::{BackwardMapEstimate, BackwardSpec, DecayDiagnostics, EstimatorKind};
pub use ensemble::{EnsembleResult, EnsembleSpec};
pub use error::{Error, ErrorKind, Result};
pub use experiment::{Check, ExperimentConfig};
pub use filter::{FilterTrajectory, LevelSetFilter};
pub use model::{Generator, HmmModel, ObservationMatrix, Simplex};
pub use poincare::{PiInfimum, PiResult};
pub use sim::{ObservationPath, RngStream, StatePath};
