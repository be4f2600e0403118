use serde::{Deserialize, Serialize};

use neuroprune::{PruneMask, PruneMethod};

use crate::error::{CliError, CliResult};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// On-disk mask for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub layer_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// 1 keeps the neuron, 0 drops it.
    pub keep: Vec<u8>,
    pub method: PruneMethod,
    pub seed: u64,
    /// MI threshold of pairwise MI pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_bits: Option<f64>,
    /// |rho| threshold of the correlation baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_keep: Option<usize>,
    pub relative_flops: f64,
    pub toolkit_version: String,
}

impl MaskFile {
    pub fn from_mask(mask: &PruneMask, layer_id: &str, relative_flops: f64) -> Self {
        let (threshold_bits, threshold) = match mask.method {
            PruneMethod::PairwisePcc => (None, mask.threshold),
            _ => (mask.threshold, None),
        };
        Self {
            layer_id: layer_id.to_string(),
            k: mask.len(),
            keep: mask.keep().iter().map(|&b| b as u8).collect(),
            method: mask.method,
            seed: mask.seed,
            threshold_bits,
            threshold,
            target_keep: mask.target_keep,
            relative_flops,
            toolkit_version: TOOLKIT_VERSION.to_string(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.keep.len() != self.k {
            return Err(CliError::Data(format!("mask lists {} entries for K = {}", self.keep.len(), self.k)));
        }
        if let Some(bad) = self.keep.iter().find(|&&v| v > 1) {
            return Err(CliError::Data(format!("mask entries must be 0 or 1, found {bad}")));
        }
        if !self.keep.contains(&1) {
            return Err(CliError::Data("mask drops every neuron".into()));
        }
        if !(self.relative_flops > 0.0 && self.relative_flops <= 1.0) {
            return Err(CliError::Data(format!("relative_flops {} outside (0, 1]", self.relative_flops)));
        }
        Ok(())
    }

    pub fn to_mask(&self) -> CliResult<PruneMask> {
        self.validate()?;
        let mut mask = PruneMask::new(self.keep.iter().map(|&v| v == 1).collect(), self.method, self.seed)?;
        mask.threshold = self.threshold_bits.or(self.threshold);
        mask.target_keep = self.target_keep;
        Ok(mask)
    }
}
