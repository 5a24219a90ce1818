//! Matrix Laplace functionals through stochastic control.
//!
//! The crate evaluates, at finite matrix size `N`, the Laplace functional
//! `-(1/N^2) log E[exp(-N^2 f)]` of Hermitian Brownian motion both directly
//! and as the cost of an optimally controlled SDE, samples the associated
//! Gibbs ensembles, and estimates free Fisher information and free entropy.

pub mod error;
pub mod free_entropy;
pub mod gibbs;
pub mod laplace;
pub mod matrix_core;
pub mod nc_poly;
pub mod potentials;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod value_function;
pub mod yosida;

pub use error::{Error, Result};
pub use free_entropy::{ChiControl, FlowOptions, FlowPoint, InitialLaw, SpectralDensity};
pub use gibbs::{ChainEstimate, GibbsEnsemble, MalaOptions, MalaRun};
pub use laplace::{ConvergenceOptions, LaplaceReport, LhsMethod, LhsOptions, RhsOptions, RhsResult};
pub use matrix_core::{CMat, HermitianTuple, RealCoords, UnitaryTuple};
pub use nc_poly::{Letter, LetterKind, NCPolynomial, TensorPolynomial, Word};
pub use potentials::{Component, Exponent, GradientScale, PotentialSpec};
pub use sde::{BrownianIncrements, ControlledPath, DriftField, FnDrift, PicardOptions, PicardReport};
pub use stats::ValueEstimate;
pub use value_function::{Curvature, DriftEstimate, OptimalDrift, Proposal, ValueQuery};
pub use yosida::{ConvexFn, SolverOptions};
