use std::path::PathBuf;

use num_bigint::BigUint;
use thiserror::Error;

use crate::space::Violation;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid architecture: {}", join_violations(.0))]
    InvalidArchitecture(Vec<Violation>),
    #[error("cannot parse architecture string: {0}")]
    Parse(String),
    #[error("infeasible space: {0}")]
    Infeasible(String),
    #[error(
        "no candidate satisfies the FLOPs window [{min}, {max}] after {attempts} draws; closest MACs found: {closest}"
    )]
    ConstraintInfeasible {
        min: u64,
        max: u64,
        attempts: usize,
        closest: u64,
    },
    #[error("alive space has {count} architectures, over the enumeration limit {limit}")]
    CardinalityOverLimit { count: BigUint, limit: u64 },
    #[error("architecture not in lookup table: {0}")]
    MissingArchitecture(String),
    #[error("evaluator failure: {0}")]
    Evaluator(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 infeasible, 4 evaluator failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidSpace(_)
            | Error::InvalidArchitecture(_)
            | Error::Parse(_)
            | Error::MissingFile(_)
            | Error::Json(_) => 2,
            Error::Infeasible(_)
            | Error::ConstraintInfeasible { .. }
            | Error::CardinalityOverLimit { .. } => 3,
            Error::Evaluator(_) | Error::MissingArchitecture(_) => 4,
            Error::Contract(_) | Error::Io(_) => 1,
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
