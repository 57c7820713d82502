use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigensolver failed on a {dim}x{dim} Hermitian matrix: {reason}")]
    EigenSolver { dim: usize, reason: String },

    #[error("eigendecomposition of dimension {dim} failed verification: residual {residual:e}, orthogonality defect {orthogonality:e}")]
    EigenVerification { dim: usize, residual: f64, orthogonality: f64 },

    #[error("level {level} out of range, only {available} levels are kept")]
    LevelOutOfRange { level: usize, available: usize },

    #[error("potential set does not match the basis: {0}")]
    PotentialMismatch(String),

    #[error("energy cutoff {e_max} collides with eigenvalue {eigenvalue} (index {index})")]
    ActiveSpaceCollision { e_max: f64, eigenvalue: f64, index: usize },

    #[error("energy cutoff {e_max} does not lie strictly inside the computed spectrum [{lowest}, {highest}]")]
    ActiveSpaceOutOfRange { e_max: f64, lowest: f64, highest: f64 },

    #[error("configuration too close to a node: |psi|^2 = {density:e} at t = {time} (Q = {position:?})")]
    NodeProximity { density: f64, time: f64, position: Vec<f64> },

    #[error("node could not be resolved after {depth} step halvings at t = {time} (Q = {position:?}, |psi|^2 = {density:e})")]
    NodeUnresolvable { depth: u32, time: f64, position: Vec<f64>, density: f64 },

    #[error("trajectory is empty")]
    EmptyTrajectory,

    #[error("config hash mismatch in {path}: expected {expected}, found {found}")]
    HashMismatch { path: PathBuf, expected: String, found: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
