//! Universal self-adaptive prompting against black-box completion backends.
//!
//! Two stages: generate and score model-produced pseudo-demonstrations from
//! a small unlabeled query set, select a diverse high-confidence subset, and
//! prepend it to every test query for a single greedy inference pass. Works
//! with any text-completion endpoint; ships a deterministic synthetic oracle
//! and a hashed n-gram embedder so everything is testable offline.

pub mod embedding;
pub mod error;
pub mod gateway;
mod hashing;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod selection;

pub use error::{Result, UspError};
pub use model::{
    validate_config, CandidateDemo, ClassDistribution, DemoPair, DemoSet, Evidence, RunConfig,
    SampleSet, TaskQuery, TaskType,
};
pub use pipeline::{
    run_strategy, run_usp, run_usp_fewshot, RunArtifacts, Strategy,
};
pub use scoring::ScoredPool;

pub use hashing::derive_seed;
