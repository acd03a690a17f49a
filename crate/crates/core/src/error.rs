use std::path::PathBuf;

use thiserror::Error;

use crate::controller::ControllerError;
use crate::costs::CostError;
use crate::feasible_set::FeasibleSetError;
use crate::lti::LtiError;
use crate::matops::MatError;
use crate::network::TopologyError;
use crate::sysid::SysidError;

/// Any failure surfaced by the experiment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Matrix(#[from] MatError),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Sysid(#[from] SysidError),
    #[error(transparent)]
    FeasibleSet(#[from] FeasibleSetError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("trial {trial}: {source}")]
    Trial { trial: usize, source: Box<Error> },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
