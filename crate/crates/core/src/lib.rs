//! Multi-behavior recommender over user-item graphs with several relation types.
//!
//! The crate is organised the way data flows through the model:
//!
//! * [`graph`]: multiplex bipartite graphs, relation schemas, ingestion and splits.
//! * [`patterns`]: basic behavior patterns and the explicit (local + global) pattern channel.
//! * [`relation`]: per-relation LightGCN propagation.
//! * [`chains`]: relation chains and their per-step transforms.
//! * [`contrastive`]: relation InfoNCE and the chain-aware weighting encoders.
//! * [`model`]: parameters, forward pass and hand-derived reverse pass of the joint objective.
//! * [`training`]: negative sampling, BPR, Adam and the epoch loop.
//! * [`evaluation`]: full-ranking Recall@K / NDCG@K and sparsity groups.

pub mod chains;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod math;
pub mod model;
pub mod patterns;
pub mod relation;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
