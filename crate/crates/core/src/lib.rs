//! Exact-oracle laboratory for preference optimization on enumerable toy policies.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod io;
pub mod math;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod space;
pub mod training;

pub use error::{Error, FailurePoint, Result};
pub use math::{RewardVector, WeightVector};
pub use policy::{LogProbSeeds, LoraAdapter, NeuralDims, PolicyMode, PolicyParams, PolicyState};
pub use space::{ResponseSpace, Sequence, VocabSpec};
