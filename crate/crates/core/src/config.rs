//! Run configuration files (TOML). Unknown keys are rejected.
//!
//! ```toml
//! strategy = "neat"
//! known_classes = [0, 1, 2]
//! k = 10
//! budget = 50
//! rounds = 5
//! seeds = [0, 1, 2]
//!
//! [dataset]
//! path = "features.aosa"
//! ```
//!
//! `[dataset.synthetic]` may replace `path` with an inline generator spec.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{generate_synthetic, load_feature_store, ClassId, FeatureStore, SyntheticSpec};
use crate::model::TrainConfig;
use crate::protocol::ProtocolConfig;
use crate::strategies::{Prefilter, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Defaults to the generator's known clusters for synthetic data.
    #[serde(default)]
    pub known_classes: Option<Vec<ClassId>>,
    #[serde(default = "default_init_fraction")]
    pub init_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub prefilter: Prefilter,
    #[serde(default = "default_true")]
    pub use_invalid_neighbors: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// CSV of prediction vectors to use instead of the trained classifier
    /// when ranking.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
}

fn default_init_fraction() -> f64 {
    0.08
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_k() -> usize {
    10
}
fn default_budget() -> usize {
    400
}
fn default_rounds() -> usize {
    9
}
fn default_true() -> bool {
    true
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg =
            Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dataset.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.predictions.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "dataset: give either path or synthetic, not both".into(),
                ))
            }
            (None, None) => return Err(Error::Config("dataset: path or synthetic is required".into())),
            (None, Some(spec)) => spec.validate()?,
            (Some(_), None) => {}
        }
        if self.dataset.path.is_some() && self.known_classes.is_none() {
            return Err(Error::Config(
                "known_classes is required for file datasets".into(),
            ));
        }
        if matches!(&self.known_classes, Some(k) if k.is_empty()) {
            return Err(Error::Config("known_classes must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let probe = self.protocol(0)?;
        probe.validate()
    }

    pub fn known_set(&self) -> Result<BTreeSet<ClassId>> {
        match (&self.known_classes, &self.dataset.synthetic) {
            (Some(k), _) => Ok(k.iter().copied().collect()),
            (None, Some(spec)) => Ok(spec.known_classes().into_iter().collect()),
            (None, None) => Err(Error::Config("known_classes is required".into())),
        }
    }

    pub fn protocol(&self, seed: u64) -> Result<ProtocolConfig> {
        Ok(ProtocolConfig {
            rounds: self.rounds,
            budget: self.budget,
            k: self.k,
            strategy: self.strategy,
            prefilter: self.prefilter,
            known_classes: self.known_set()?,
            init_fraction: self.init_fraction,
            test_fraction: self.test_fraction,
            use_invalid_neighbors: self.use_invalid_neighbors,
            train: self.train.clone(),
            seed,
        })
    }

    pub fn load_dataset(&self) -> Result<FeatureStore> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(path), _) => load_feature_store(path),
            (None, Some(spec)) => generate_synthetic(spec),
            (None, None) => Err(Error::Config("dataset: path or synthetic is required".into())),
        }
    }

    /// Display name for reports: the strategy, plus the prefilter if any.
    pub fn label(&self) -> String {
        match self.prefilter {
            Prefilter::None => self.strategy.name().to_string(),
            Prefilter::KnownDetection => format!("{}+known_detection", self.strategy.name()),
        }
    }
}
