//! Spatio-temporal graph neural controlled differential equations for
//! traffic forecasting.
//!
//! Inputs are turned into continuous paths by natural cubic splines
//! ([`spline`]), driven through a temporal CDE and a graph CDE ([`model`])
//! with a fixed-step solver ([`solver`]), and trained end to end with the
//! reverse-mode tape in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod solver;
pub mod spline;
pub mod train;

use thiserror::Error;

pub use autodiff::{Tape, Tensor, Var};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use model::{Stgncde, Variant};

/// Any failure surfaced to the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

impl Error {
    /// Process exit code: 2 config, 3 data, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => EXIT_CONFIG,
            Error::Train(e) if e.is_divergence() => EXIT_DIVERGENCE,
            Error::Model(model::ModelError::Solver(solver::SolverError::Divergence { .. })) => EXIT_DIVERGENCE,
            Error::Train(train::TrainError::Model(model::ModelError::ParamShape { .. })) => EXIT_CONFIG,
            Error::Train(train::TrainError::OutputDim { .. }) => EXIT_CONFIG,
            Error::Model(model::ModelError::ParamShape { .. } | model::ModelError::Input(_)) => EXIT_CONFIG,
            Error::Checkpoint(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        }
    }
}
