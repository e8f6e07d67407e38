//! Desk-scale simulator for two-phase federated learning with model
//! decoupling: a Wasserstein-based personalized-layer selection phase
//! followed by decoupled training with cosine-similarity weighted body
//! aggregation, plus FedAvg / local-only / fixed-head reference baselines
//! and exact communication accounting.
//!
//! Everything is deterministic: all randomness flows from explicit seeds
//! and results are independent of the worker-thread count.

pub mod datakit;
pub mod aggregation;
pub mod featdist;
pub mod nn;
pub mod orchestrator;
pub mod selection;
pub mod seeds;

pub use datakit::{ClientShard, Dataset, PartitionPlan};
pub use aggregation::{SimilarityMatrix, SplitMode};
pub use featdist::{GaussianSummary, LayerScore};
pub use nn::{ForwardTrace, LayerKind, LayerSpec, Model, ModelSpec, ParamPartition, Tensor};
pub use orchestrator::{RunConfig, RunOptions, RunOutput, RunReport, Strategy};
