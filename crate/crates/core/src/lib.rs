//! Channel-searchable supernet search: search-space modeling, MAC counting,
//! step-wise operation shrinking, constrained evolution and the pipeline
//! that strings them together.

pub mod cost;
pub mod error;
pub mod evaluator;
pub mod events;
pub mod evolution;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod shrinking;
pub mod space;
pub mod stats;

pub use error::{Error, Result};
pub use evaluator::{EvalRecord, Evaluator, SurrogateEvaluator, TableEvaluator, Workers};
pub use evolution::{evolve, EvolutionConfig};
pub use shrinking::{run_shrinking, OperationGraph, ShrinkSchedule};
pub use space::{Architecture, Mode, SearchSpaceSpec};
