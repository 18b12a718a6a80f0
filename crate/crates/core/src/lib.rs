//! Layer-adaptive expert pruning for mixture-of-experts training traces.
//!
//! The pipeline runs in five stages. First, record or synthesize a routed-token
//! trace ([`tracegen`], [`toytrainer`]). Second, decide per-layer expert
//! pruning once loads stabilize ([`prune`]). Third, place the surviving experts
//! on device groups ([`rearrange`]). Fourth, account for the parameter and
//! step-time effects ([`clustersim`]). Finally, [`cli`] exposes every stage as
//! a subcommand.

pub mod cli;
pub mod clustersim;
pub mod error;
pub mod kvfile;
pub mod par;
pub mod prune;
pub mod rearrange;
pub mod stats;
pub mod toytrainer;
pub mod trace;
pub mod tracegen;

pub use error::{Error, Result};
pub use par::Execution;
pub use stats::{load_stats, window_aggregate, LoadSnapshot, LoadStats};
pub use trace::{validate_trace, ExpertTokenCounts, ModelStructure};
