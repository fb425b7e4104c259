//! Risk-averse temporal-difference learning with linear function
//! approximation on finite Markov decision processes.
//!
//! The crate provides four layers:
//!
//! - [`markov`]: finite chains under a fixed policy, stationary analysis,
//!   multistep matrices, seeded simulation;
//! - [`risk`]: coherent transition risk mappings (expectation,
//!   mean-semideviation, CVaR) with dual envelopes, distortion coefficients
//!   and sample-based plug-in estimators;
//! - [`projection`] and [`td`]: exact projected-equation solvers used as
//!   oracles, and the stochastic RA-TD(0) / RA-TD(lambda) learners;
//! - [`fleet`] and [`harness`]: a desk-scale fleet-repositioning benchmark
//!   and the experiment runner behind the `riskd` CLI.

pub mod error;
pub mod fleet;
pub mod harness;
pub mod markov;
pub mod projection;
pub mod risk;
pub mod seeding;
pub mod td;

pub use error::{Error, Result};
pub use fleet::{DemandModel, Decision, FleetConfig, FleetState};
pub use harness::{dominance_check, empirical_cdf, run_experiment, ExperimentConfig};
pub use markov::{MarkovChain, MultistepMatrix, StationaryDistribution, Trajectory};
pub use projection::{FeatureModel, ProjectedEquation, ProjectedSolution};
pub use risk::{DistortionReport, EnvelopeVertexSet, RiskMapping, SampleRiskEstimate};
pub use td::{LearnerState, LearningTrace, StepsizeSchedule};
