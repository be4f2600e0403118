//! Optional TOML configuration. Every value may be overridden by a flag;
//! anything left unset falls back to the built-in default.

use std::path::Path;

use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub tuning: TuningSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub toy: ToySection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub alpha: Option<f64>,
    pub sample_fraction: Option<f64>,
    pub mi_batch: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub seed: Option<u64>,
    pub max_itr: Option<usize>,
    pub mds_dim: Option<usize>,
    pub seeds: Option<u64>,
    pub target_flops: Option<f64>,
    pub threshold_bits: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySection {
    pub seed: Option<u64>,
    pub d_in: Option<usize>,
    pub hidden: Option<usize>,
    pub classes: Option<usize>,
    pub groups: Option<usize>,
    pub noise: Option<f64>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
                Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            }
        }
    }
}

/// Flag, then config value, then default.
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None::<i32>, None, 3), 3);
    }

    #[test]
    fn parses_sections() {
        let c = Config::parse("[tuning]\ngamma = 2.0\n[prune]\nseeds = 50\n").unwrap();
        assert_eq!(c.tuning.gamma, Some(2.0));
        assert_eq!(c.prune.seeds, Some(50));
        assert_eq!(c.estimation, EstimationSection::default());
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = Config::parse("[tuning]\ngama = 2.0\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
