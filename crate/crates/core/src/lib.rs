//! Information-theoretic neuron pruning for feed-forward layers.
//!
//! Neurons are compared through kernel-based Rényi entropy estimates computed
//! on normalized Gram matrices. Two pruners are provided: a randomized
//! pairwise filter driven by a mutual-information threshold, and a
//! clustering pipeline (MI distance, classical MDS, k-means) that keeps one
//! representative per cluster for a target neuron budget.

pub mod activation;
pub mod cluster;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod gram;
pub mod mask;
pub mod metrics;
pub mod pairwise;
pub mod sigma;
pub mod toy;

pub use activation::ActivationMatrix;
pub use entropy::{joint_entropy, mi_matrix, mutual_information, renyi_entropy, Alpha, MiMatrix};
pub use error::{Error, Result};
pub use gram::{hadamard_joint, rbf_gram, NormalizedGram};
pub use mask::{PruneMask, PruneMethod};
pub use pairwise::{prune_pairwise, prune_pcc, prune_random, prune_weight_magnitude, redundancy_filter};
pub use sigma::{scott_sigma, tune_all, SigmaSchedule, TuningConfig};
