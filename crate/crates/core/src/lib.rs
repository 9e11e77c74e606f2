//! Monte Carlo engine for conditional mean-field SDEs under partial
//! observation.
//!
//! The system couples a state whose diffusion depends on the law of its own
//! conditional mean given the observations with a likelihood process that
//! changes measure between the reference space (where simulation happens)
//! and the model space. The crate provides:
//!
//! - deterministic counter-based noise streams, empirical laws, and exact
//!   1-D / path-space Wasserstein distances ([`rng`], [`law`], [`assign`]);
//! - coefficient sets with declared derivatives, an affine path-feature
//!   kernel, and validators for the standing assumptions ([`model`]);
//! - the nested scenario/particle forward solver with Kallianpur-Striebel
//!   conditional means and filtering cross-checks ([`sim`], [`kalman`]);
//! - the law-flow solution map and its damped Picard iteration
//!   ([`fixed_point`]);
//! - variational processes, the adjoint mean-field BSDE via least-squares
//!   Monte Carlo, the maximum-principle gradient, and a projected-gradient
//!   optimizer ([`adjoint`]);
//! - validation suites used by the command-line harness ([`suites`]).

pub mod adjoint;
pub mod assign;
pub mod error;
pub mod fixed_point;
pub mod grid;
pub mod kalman;
pub mod law;
pub mod model;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod suites;

pub use error::{CmfError, Result};
pub use grid::TimeGrid;
pub use law::{
    fourth_moment, mix_flows, quantile_mix, wasserstein_1d, wasserstein_flow, EmpiricalLaw,
    MarginalLawFlow,
};
pub use model::{builtin_model, BuiltinModel, CoefficientSet, ControlBounds, ModelParams};
pub use policy::{perturb, ControlPolicy};
pub use rng::{brownian_increments, Channel, RngStream};
pub use sim::{
    fkk_propagate, martingale_check, simulate, zakai_consistency, ScenarioEnsemble, SimOptions,
};
