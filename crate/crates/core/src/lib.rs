//! A self-contained recommender-training engine for implicit feedback.
//!
//! The model propagates user/item embeddings over the symmetrically
//! normalized interaction graph with per-layer mixed noise, builds a
//! second set of per-layer views from a pair of low-rank factorizations
//! (gradient-descent MF and randomized truncated SVD) of the same
//! adjacency, and trains the embedding tables with a pairwise ranking
//! loss plus a per-layer InfoNCE term that aligns the two views.
//! Evaluation is full-ranking Recall@k / NDCG@k over all items the user
//! has not interacted with in training.
//!
//! Pipeline: ingest interaction logs ([`data`]) → normalized sparse
//! adjacency → factor pair ([`factorization`]) → noisy propagation and
//! fused views ([`model`]) → ranking + contrastive training with manual
//! reverse-mode gradients ([`training`]) → checkpoint → metric reports
//! and ablation/sweep tables ([`eval`]). Every stage is deterministic
//! given a seed; independent randomness consumers draw from separate
//! counter-based streams ([`rng`]).

pub mod binfmt;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod factorization;
pub mod linalg;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod rng;
pub mod training;

pub use config::TrainConfig;
pub use data::{InteractionMatrix, NormalizedAdjacency};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use factorization::LowRankFactors;
pub use model::{Checkpoint, EmbeddingState};
pub use training::{train, TrainOutcome};
