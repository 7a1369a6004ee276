use std::path::PathBuf;

use thiserror::Error;

use opolo_core::divergence::DivergenceError;
use opolo_core::envs::EnvError;
use opolo_core::inverse::InverseError;
use opolo_core::mdp::MdpError;
use opolo_core::occupancy::OccupancyError;
use opolo_core::opolo::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("{algorithm} seed {seed}: {source}")]
    Train { algorithm: String, seed: u64, source: TrainError },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Inverse(#[from] InverseError),
}

impl HarnessError {
    /// 1 for a run that started and then failed numerically, 2 for bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Train { source: TrainError::Diverged { .. }, .. } => 1,
            _ => 2,
        }
    }
}
