//! Deep Galerkin solver for a mixed optimal stopping and portfolio control
//! problem, solved through its linear dual variational inequality.
//!
//! The pipeline:
//!
//! * [`market`]: parameters, utilities and their convex duals;
//! * [`jetnet`]: a Mish network evaluated with second-order input jets;
//! * [`loss`]: the scaled DGM and fractional-boundary-regularised losses;
//! * [`trainer`]: the epoch loop with Adam and a step-halving schedule;
//! * [`dual_primal`]: change of variables and primal value, wealth and control;
//! * [`benchmarks`]: binomial tree and projected SOR reference solvers;
//! * [`consistency`]: Monte-Carlo checks of the primal-dual identities;
//! * [`config`] and [`experiment`]: the config schema and the experiment
//!   grid shared by the CLI and the acceptance suite.

pub mod benchmarks;
pub mod config;
pub mod consistency;
pub mod dual_primal;
pub mod experiment;
pub mod jetnet;
pub mod loss;
pub mod market;
pub mod report;
pub mod trainer;
