use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use segflow_core::bprfit::FitOptions;
use segflow_core::domain::SplitWeeks;
use segflow_core::mlp::TrainConfig;
use segflow_core::synthgen::CityConfig;

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_k() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default = "default_k")]
    pub k_folds: usize,
    #[serde(default)]
    pub fold_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k_folds: default_k(),
            fold_seed: 0,
        }
    }
}

/// Another city for zero-shot transfer: its data and the run directory
/// holding its locally trained models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferTarget {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where `gen` writes the city tables and every other command reads them.
    pub data_dir: PathBuf,
    /// Run directory for models and reports.
    pub out_dir: PathBuf,
    /// Required by `gen`.
    #[serde(default)]
    pub city: Option<CityConfig>,
    #[serde(default)]
    pub split: SplitWeeks,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub bprfit: FitOptions,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub transfer: Vec<TransferTarget>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        self.train.validate()?;
        if let Some(c) = &self.city {
            c.validate()?;
        }
        if self.eval.k_folds < 2 {
            bail!("eval.k_folds must be >= 2");
        }
        Ok(())
    }
}

/// A config file holds either a full experiment or, for `gen`, a bare city.
pub enum ConfigFile {
    Experiment(Box<ExperimentConfig>),
    City(Box<CityConfig>),
}

pub fn load(path: &Path) -> Result<ConfigFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let is_experiment = value
        .as_object()
        .is_some_and(|o| o.contains_key("data_dir") || o.contains_key("out_dir"));
    if is_experiment {
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .with_context(|| format!("{}: invalid experiment config", path.display()))?;
        Ok(ConfigFile::Experiment(Box::new(cfg)))
    } else {
        let cfg: CityConfig = serde_json::from_value(value)
            .with_context(|| format!("{}: invalid city config", path.display()))?;
        Ok(ConfigFile::City(Box::new(cfg)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"data_dir": "d", "out_dir": "o", "epochs": 3}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        let nested = r#"{"data_dir": "d", "out_dir": "o", "train": {"epoch": 3}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(nested).is_err());
    }

    #[test]
    fn defaults_filled() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"data_dir": "d", "out_dir": "o"}"#).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.split, SplitWeeks::default());
        assert_eq!(cfg.eval.k_folds, 5);
        assert_eq!(cfg.bprfit.min_samples, 20);
    }
}
