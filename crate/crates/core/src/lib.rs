//! Distributed online LQR control with unknown dynamics.
//!
//! Agents share one linear plant but see private time-varying quadratic costs.
//! They explore under a prior stabilising controller, identify the plant with
//! decentralised least squares (EXTRA), and then run distributed online
//! projected gradient descent over a steady-state covariance relaxation of the
//! LQR problem, extracting a Gaussian linear policy every round.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod matops;
pub mod lti;
pub mod network;
pub mod sysid;
pub mod feasible_set;
pub mod costs;
pub mod controller;
pub mod harness;
mod error;

pub use controller::{extract_policy, ControllerError, ExtractedPolicy};
pub use costs::{Benchmark, CostError, CostPair, CostSchedule};
pub use error::{Error, Result};
pub use feasible_set::{DykstraSettings, FeasibleSet, FeasibleSetError};
pub use harness::{ExperimentConfig, McAggregate, MonteCarloResult, NetworkSpec, RegretSeries, RunOptions, TrialResult};
pub use lti::{LinearPolicy, LtiError, LtiSystem, StabilityCert, StabilityRejection};
pub use matops::{MatError, SymMatrix};
pub use network::{MixingMatrix, TopologyError};
pub use sysid::{SysidError, SystemEstimate};
