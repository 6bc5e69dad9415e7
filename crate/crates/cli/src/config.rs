//! Experiment configuration: JSON-loadable description of a sweep
//! (dataset, n-values, modes, hierarchy source, seeds, training knobs).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use conceptree::data::{make_blobs, load_mnist, BlobSpec, Dataset, Split};
use conceptree::nn::TrainConfig;
use conceptree::{Error, Hierarchy, Result};

/// Hierarchy over the ten digit classes used for guided MNIST runs:
/// loop-heavy digits, stroke digits, and a top split separating the
/// mostly-curved group from the mostly-straight one.
pub const MNIST_DEFAULT_HIERARCHY: &str = "(((0,6),2,(3,5,8)),((1,7),(4,9)))";

/// Directory holding the four uncompressed MNIST IDX files; overridden
/// by this environment variable.
pub const DATA_DIR_ENV: &str = "CONCEPTREE_DATA_DIR";
pub const DATA_DIR_DEFAULT: &str = "data/mnist";

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DATA_DIR_DEFAULT))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Mnist,
    Blobs(BlobSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Flat,
    Guided,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Flat => "flat",
            Mode::Guided => "guided",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchySource {
    Clustering,
    Affinity,
    Fixed(Hierarchy),
    MnistPaperDefault,
}

fn default_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 16,
        max_epochs_per_phase: 10,
        ..TrainConfig::default()
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub n_values: Vec<usize>,
    pub modes: Vec<Mode>,
    pub hierarchy_source: HierarchySource,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::Config("n_values must be non-empty and positive".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        self.train.validate()?;
        if let DatasetSpec::Blobs(spec) = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    /// Loads the train/test pair this config describes. Blob datasets
    /// draw the test split from an independent seeded stream.
    pub fn load_dataset(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Mnist => {
                let dir = data_dir();
                Ok((load_mnist(&dir, Split::Train)?, load_mnist(&dir, Split::Test)?))
            }
            DatasetSpec::Blobs(spec) => {
                let base = self.seeds[0];
                let train = make_blobs(spec, base)?;
                let mut test = make_blobs(spec, base.wrapping_add(0x9e37_79b9))?;
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }

    /// Concept set of the configured dataset (0..classes).
    pub fn concepts(&self, train: &Dataset) -> BTreeSet<usize> {
        (0..train.concept_count()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_applies_defaults() {
        let text = r#"{
            "dataset": "mnist",
            "n_values": [500, 2000],
            "modes": ["flat", "guided"],
            "hierarchy_source": {"fixed": "((0,1),2)"},
            "output_dir": "/tmp/out"
        }"#;
        let config: ExperimentConfig = serde_json::from_str(text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.seeds, vec![0, 1, 2]);
        assert_eq!(config.train.batch_size, 16);
        match &config.hierarchy_source {
            HierarchySource::Fixed(h) => assert_eq!(h.to_string(), "((0,1),2)"),
            other => panic!("parsed {other:?}"),
        }
        let back = serde_json::to_string(&config).unwrap();
        let again: ExperimentConfig = serde_json::from_str(&back).unwrap();
        assert_eq!(again.n_values, config.n_values);
    }

    #[test]
    fn empty_n_values_rejected() {
        let config = ExperimentConfig {
            dataset: DatasetSpec::Mnist,
            n_values: vec![],
            modes: vec![Mode::Flat],
            hierarchy_source: HierarchySource::MnistPaperDefault,
            seeds: vec![0],
            output_dir: PathBuf::from("/tmp/out"),
            train: default_train(),
        };
        assert!(config.validate().is_err());
    }
}
