//! Experiment configuration: a `key = value` file with `[section]` headers.
//!
//! ```text
//! [experiment]
//! split = "s1"
//! strategy = "at-ft"
//! L = 1
//! eps_s = 0.5
//! seeds = [0, 1, 2, 3, 4]
//! out = "runs/s1-at-ft"
//!
//! [train]
//! epochs = 30
//! ```
//!
//! Every key is optional; unknown keys are an error.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use advxfer_core::datagen::{SplitConfig, SOURCE_CLASSES};
use advxfer_core::model::{DEFAULT_WIDTHS, NUM_BLOCKS};
use advxfer_core::strategies::{RunConfig, StrategyKind, StrategySpec, TrainConfig, DIRECT_LR, FINETUNE_LR};
use advxfer_core::tensor::ScalarMode;
use advxfer_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Overrides the pretrain-cache directory.
pub const CACHE_ENV: &str = "ADVXFER_CACHE";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub model: ModelSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub split: String,
    /// `st`, `at`, `st-ft`, `st-aft`, `at-ft` or `at-aft`.
    pub strategy: String,
    #[serde(rename = "L")]
    pub frozen_prefix: usize,
    pub eps_s: Option<f64>,
    pub eps_t: Option<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            split: "s1".into(),
            strategy: "st".into(),
            frozen_prefix: 1,
            eps_s: None,
            eps_t: None,
            seeds: (0..5).collect(),
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub samples_per_container: usize,
    pub test_samples_per_container: usize,
    /// Source-domain images; 0 means ten times the target train set.
    pub source_size: usize,
    pub source_classes: usize,
    pub seed: u64,
    /// Read datasets written by `gen-data` instead of generating them.
    pub dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples_per_container: 400,
            test_samples_per_container: 100,
            source_size: 0,
            source_classes: SOURCE_CLASSES.len(),
            seed: 0,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub source_epochs: usize,
    pub batch_size: usize,
    pub lr_direct: f64,
    pub lr_finetune: f64,
    /// `single` or `double`.
    pub precision: String,
    /// Seed of source-domain training. Run seeds only drive target phases,
    /// so one source model serves every seed.
    pub source_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            source_epochs: 30,
            batch_size: 32,
            lr_direct: DIRECT_LR,
            lr_finetune: FINETUNE_LR,
            precision: "single".into(),
            source_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: [usize; NUM_BLOCKS],
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { widths: DEFAULT_WIDTHS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub jobs: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            jobs: 1,
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("bad config {}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn strategy_kind(&self) -> Result<StrategyKind> {
        self.experiment.strategy.parse()
    }

    pub fn precision(&self) -> Result<ScalarMode> {
        self.train.precision.parse().map_err(Error::Config)
    }

    pub fn spec(&self) -> Result<StrategySpec> {
        let e = &self.experiment;
        Ok(StrategySpec::resolve(self.strategy_kind()?, e.eps_s, e.eps_t, e.frozen_prefix))
    }

    pub fn split(&self) -> Result<SplitConfig> {
        Ok(SplitConfig::builtin(&self.experiment.split, self.data.samples_per_container)?
            .with_test_samples(self.data.test_samples_per_container))
    }

    /// Source-domain size after applying the ten-times default.
    pub fn source_size(&self, target_train_len: usize) -> usize {
        match self.data.source_size {
            0 => 10 * target_train_len,
            n => n,
        }
    }

    /// Training settings for one run seed.
    pub fn run_config(&self, seed: u64) -> Result<RunConfig> {
        let t = &self.train;
        let precision = self.precision()?;
        let base = |epochs, lr0, seed| TrainConfig {
            epochs,
            lr0,
            batch_size: t.batch_size,
            seed,
            precision,
        };
        Ok(RunConfig {
            widths: self.model.widths,
            source: base(t.source_epochs, t.lr_direct, t.source_seed),
            direct: base(t.epochs, t.lr_direct, seed),
            finetune: base(t.epochs, t.lr_finetune, seed),
        })
    }

    /// `$ADVXFER_CACHE`, else `[run] cache_dir`, else `<out>/cache`.
    pub fn cache_dir(&self) -> PathBuf {
        if let Some(dir) = env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(dir);
        }
        self.run.cache_dir.clone().unwrap_or_else(|| self.experiment.out.join("cache"))
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.split()?;
        self.spec()?.validate()?;
        self.run_config(0)?.validate()?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.data.samples_per_container == 0 || self.data.test_samples_per_container == 0 {
            return Err(Error::config("samples per container must be positive"));
        }
        if !(2..=SOURCE_CLASSES.len()).contains(&self.data.source_classes) {
            return Err(Error::config(format!(
                "source_classes must be in 2..={}, got {}",
                SOURCE_CLASSES.len(),
                self.data.source_classes
            )));
        }
        if self.run.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        Ok(())
    }
}

/// Parses `N..M` (inclusive) or a single seed.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("bad seed range '{s}' (expected N..M)"));
    match s.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            if b < a {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![s.trim().parse().map_err(|_| bad())?]),
    }
}
