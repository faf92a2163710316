//! Source models keyed by (kind, eps_s, seed), shared across runs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{train_source, PhaseRecord, RunConfig};
use crate::attack::PerturbationBudget;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, MicroResNet, Provenance};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    /// Clean source training (ST_FT, ST_AFT).
    Standard,
    /// Adversarial source training (AT_FT, AT_AFT).
    Adversarial,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Standard => "st",
            SourceKind::Adversarial => "at",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Trained,
}

/// Everything that determines a source model; stored with the checkpoint
/// and compared on every cache hit.
pub fn source_provenance(
    source: &Dataset,
    kind: SourceKind,
    budget: Option<&PerturbationBudget>,
    config: &RunConfig,
) -> Provenance {
    let c = &config.source;
    let fingerprint = source.samples.iter().fold(crc32fast::Hasher::new(), |mut h, s| {
        h.update(&(s.label as u32).to_le_bytes());
        for v in s.image.values() {
            h.update(&v.to_le_bytes());
        }
        h
    });
    let mut p = Provenance::new();
    p.set("source.kind", kind.as_str())
        .set("source.samples", source.len())
        .set("source.classes", source.num_classes())
        .set("source.fingerprint", format!("{:08x}", fingerprint.finalize()))
        .set("train.epochs", c.epochs)
        .set("train.lr0", c.lr0)
        .set("train.batch_size", c.batch_size)
        .set("train.seed", c.seed)
        .set("train.precision", c.precision)
        .set("train.widths", format!("{:?}", config.widths));
    match (kind, budget) {
        (SourceKind::Adversarial, Some(b)) => {
            p.set("train.epsilon", b.epsilon)
                .set("attack.p", b.p)
                .set("attack.iters", b.iters)
                .set("attack.step", b.step)
                .set("attack.init", format!("{:?}", b.init))
                .set("attack.return_mode", format!("{:?}", b.return_mode));
        }
        _ => {
            p.set("train.epsilon", 0.0);
        }
    }
    p
}

/// On-disk cache of trained source models.
///
/// Readers run concurrently; building an entry holds an exclusive per-key
/// lock within the process, and files appear atomically.
#[derive(Debug)]
pub struct PretrainCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl PretrainCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(kind: SourceKind, eps_s: f64, seed: u64) -> String {
        format!("{}-eps{}-seed{}", kind.as_str(), eps_s, seed)
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.mrv"))
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(key.to_string()).or_default().clone()
    }

    /// Returns the cached source model for the request, training and storing
    /// it first if absent. A stored entry under the same key but with
    /// different provenance is an error and is never overwritten.
    pub fn get_or_train<T: Scalar>(
        &self,
        source: &Dataset,
        kind: SourceKind,
        budget: Option<&PerturbationBudget>,
        config: &RunConfig,
    ) -> Result<(MicroResNet<T>, PhaseRecord, CacheOutcome)> {
        let eps = match kind {
            SourceKind::Standard => 0.0,
            SourceKind::Adversarial => budget.map_or(0.0, |b| b.epsilon),
        };
        let key = Self::key(kind, eps, config.source.seed);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

        let requested = source_provenance(source, kind, budget, config);
        let path = self.path_for(&key);
        if path.exists() {
            let (model, stored) = load_checkpoint::<T>(&path)?;
            let differing: Vec<String> = requested
                .entries()
                .filter(|(k, v)| stored.get(k) != Some(*v))
                .map(|(k, v)| format!("{k}: stored {:?}, requested {v:?}", stored.get(k)))
                .collect();
            if !differing.is_empty() {
                return Err(Error::config(format!(
                    "cache entry {} has different provenance ({}); refusing to overwrite",
                    path.display(),
                    differing.join("; ")
                )));
            }
            let record = PhaseRecord::read_provenance(&stored)?;
            return Ok((model, record, CacheOutcome::Hit));
        }

        let (model, record) = train_source::<T>(source, kind, budget, config)?;
        let mut prov = requested;
        record.write_provenance(&mut prov);
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        save_checkpoint(&model, &prov, &path)?;
        Ok((model, record, CacheOutcome::Trained))
    }
}
