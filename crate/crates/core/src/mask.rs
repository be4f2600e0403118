use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    PairwiseMi,
    ClusterMi,
    Random,
    WeightMagnitude,
    PairwisePcc,
}

impl PruneMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMethod::PairwiseMi => "pairwise_mi",
            PruneMethod::ClusterMi => "cluster_mi",
            PruneMethod::Random => "random",
            PruneMethod::WeightMagnitude => "weight_magnitude",
            PruneMethod::PairwisePcc => "pairwise_pcc",
        }
    }
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Keep/drop decision for every neuron of one layer, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    keep: Vec<bool>,
    pub method: PruneMethod,
    pub seed: u64,
    /// Redundancy threshold: bits for MI-driven pruning, |rho| for PCC.
    pub threshold: Option<f64>,
    pub target_keep: Option<usize>,
    pub iterations_used: usize,
}

impl PruneMask {
    pub fn new(keep: Vec<bool>, method: PruneMethod, seed: u64) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(invalid_param("a prune mask must keep at least one neuron"));
        }
        Ok(Self { keep, method, seed, threshold: None, target_keep: None, iterations_used: 0 })
    }

    pub fn all_keep(k: usize, method: PruneMethod) -> Result<Self> {
        Self::new(vec![true; k], method, 0)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
    }

    pub fn dropped_indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect()
    }
}
