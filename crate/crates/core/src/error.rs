use thiserror::Error;

use crate::graph::{FactorKind, VarKey};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("variable {0} is not present in the assignment")]
    UnresolvedVariable(VarKey),

    #[error("noise model: {0}")]
    NoiseModel(String),

    #[error("factor {index} ({kind:?}) produced a non-finite residual or jacobian")]
    Linearization { index: usize, kind: FactorKind },

    #[error("normal equations are rank deficient; unconstrained keys: {}", fmt_keys(.keys))]
    RankDeficient { keys: Vec<VarKey> },

    #[error("levenberg-marquardt stalled: damping reached {lambda:e} without an accepted step")]
    Stalled { lambda: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("occupancy grid has no free cells")]
    DegenerateMap,

    #[error("query point ({x}, {y}) lies outside the map beyond the allowed margin")]
    OutOfBounds { x: f64, y: f64 },

    #[error("trajectories are not aligned: {0}")]
    Alignment(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("scenario solve failed: {context}: {source}")]
    Scenario {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("grid file: {0}")]
    GridFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_scenario(self, context: impl Into<String>) -> Self {
        Error::Scenario {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

fn fmt_keys(keys: &[VarKey]) -> String {
    keys.iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
