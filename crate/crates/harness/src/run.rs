use std::fs;
use std::path::Path;

use advxfer_core::datagen::{
    catalog, check_source_ratio, generate_source_dataset, generate_target_dataset, mix_seed, read_dataset, Dataset,
    Role,
};
use advxfer_core::model::{save_checkpoint, MicroResNet, Provenance};
use advxfer_core::strategies::{run_strategy, PretrainCache, RunTrace, SourceInput, StrategySpec};
use advxfer_core::tensor::{Scalar, ScalarMode};
use advxfer_core::{Error, Result};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::metrics::{evaluate, mean_std, MetricsReport};

pub const SUMMARY_HEADER: &str = "seed,accuracy";

/// Source, target-train and target-test sets of one experiment.
#[derive(Debug, Clone)]
pub struct Datasets {
    /// Absent when no strategy of the experiment needs it.
    pub source: Option<Dataset>,
    pub train: Dataset,
    pub test: Dataset,
}

impl Datasets {
    /// Reads `[data] dir` if set, otherwise generates from the config.
    pub fn prepare(config: &ExperimentConfig, need_source: bool) -> Result<Self> {
        if let Some(dir) = &config.data.dir {
            if !dir.is_dir() {
                return Err(advxfer_core::datagen::DataError::Read {
                    path: dir.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
                }
                .into());
            }
            return Ok(Self {
                source: need_source.then(|| read_dataset(dir, Role::Source)).transpose()?,
                train: read_dataset(dir, Role::TargetTrain)?,
                test: read_dataset(dir, Role::TargetTest)?,
            });
        }
        let (train, test) = generate_target_dataset(&catalog(), &config.split()?, config.data.seed)?;
        let source = need_source
            .then(|| {
                generate_source_dataset(
                    config.data.source_classes,
                    config.source_size(train.len()),
                    mix_seed(config.data.seed, 0x50),
                )
            })
            .transpose()?;
        Ok(Self { source, train, test })
    }
}

/// Runs strategies against shared data and a shared source-model cache.
#[derive(Debug)]
pub struct Runner<'a> {
    pub config: &'a ExperimentConfig,
    pub data: &'a Datasets,
    pub cache: PretrainCache,
}

impl<'a> Runner<'a> {
    pub fn new(config: &'a ExperimentConfig, data: &'a Datasets) -> Self {
        Self {
            config,
            data,
            cache: PretrainCache::new(config.cache_dir()),
        }
    }

    /// One strategy run for one seed, evaluated on the test set. Transfer
    /// kinds take their source model from the cache.
    pub fn run_cell<T: Scalar>(
        &self,
        spec: &StrategySpec,
        seed: u64,
    ) -> Result<(MicroResNet<T>, RunTrace, MetricsReport)> {
        spec.validate()?;
        let rc = self.config.run_config(seed)?;
        let input = match spec.source_kind() {
            None => SourceInput::None,
            Some(kind) => {
                let source = self
                    .data
                    .source
                    .as_ref()
                    .ok_or_else(|| Error::config(format!("{} needs a source dataset", spec.kind)))?;
                check_source_ratio(source, &self.data.train)?;
                let (model, record, _) = self.cache.get_or_train::<T>(source, kind, spec.source_budget.as_ref(), &rc)?;
                SourceInput::Pretrained(model, record)
            }
        };
        let (model, trace) = run_strategy(spec, input, &self.data.train, &rc)?;
        let report = evaluate(&model, &self.data.test)?;
        Ok((model, trace, report))
    }

    /// Like [`Runner::run_cell`] but in the configured precision, keeping
    /// only the report.
    pub fn evaluate_cell(&self, spec: &StrategySpec, seed: u64) -> Result<MetricsReport> {
        match self.config.precision()? {
            ScalarMode::Single => self.run_cell::<f32>(spec, seed).map(|r| r.2),
            ScalarMode::Double => self.run_cell::<f64>(spec, seed).map(|r| r.2),
        }
    }

    /// Maps `f` over `items` on up to `[run] jobs` threads, preserving order.
    pub fn par_map<I, O, F>(&self, items: Vec<I>, f: F) -> Vec<O>
    where
        I: Send,
        O: Send,
        F: Fn(I) -> O + Sync + Send,
    {
        let jobs = self.config.run.jobs.max(1);
        if jobs == 1 {
            return items.into_iter().map(f).collect();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
            Err(_) => items.into_iter().map(f).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub trace: RunTrace,
    pub report: MetricsReport,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_seed<T: Scalar>(runner: &Runner<'_>, spec: &StrategySpec, seed: u64) -> Result<SeedOutcome> {
    let config = runner.config;
    let dir = config.experiment.out.join(format!("seed-{seed}"));
    write(&dir.join("config.toml"), &config.to_toml())?;
    let (model, trace, report) = match runner.run_cell::<T>(spec, seed) {
        Ok(r) => r,
        Err(Error::Divergence { detail, trace }) => {
            let partial = RunTrace { phases: trace };
            write(&dir.join("trace.tsv"), &partial.to_tsv())?;
            return Err(Error::Divergence {
                detail,
                trace: partial.phases,
            });
        }
        Err(e) => return Err(e),
    };
    let mut prov = Provenance::new();
    prov.set("run.strategy", spec.kind.name())
        .set("run.split", &config.experiment.split)
        .set("run.seed", seed)
        .set("run.L", spec.frozen_prefix)
        .set("run.eps_s", spec.source_budget.map_or(0.0, |b| b.epsilon))
        .set("run.eps_t", spec.target_budget.map_or(0.0, |b| b.epsilon));
    save_checkpoint(&model, &prov, &dir.join("model.mrv"))?;
    write(&dir.join("trace.tsv"), &trace.to_tsv())?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    Ok(SeedOutcome { seed, trace, report })
}

/// Runs the configured strategy for every seed and writes, under
/// `[experiment] out`, the resolved config, a `seed-N/` directory per seed
/// (checkpoint, trace, metrics, config) and `summary.csv`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SeedOutcome>> {
    config.validate()?;
    let spec = config.spec()?;
    let data = Datasets::prepare(config, spec.kind.is_transfer())?;
    let out = &config.experiment.out;
    write(&out.join("config.toml"), &config.to_toml())?;
    let runner = Runner::new(config, &data);
    let precision = config.precision()?;
    let results = runner.par_map(config.experiment.seeds.clone(), |seed| match precision {
        ScalarMode::Single => run_seed::<f32>(&runner, &spec, seed),
        ScalarMode::Double => run_seed::<f64>(&runner, &spec, seed),
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut summary = format!("{SUMMARY_HEADER}\n");
    for o in &outcomes {
        summary.push_str(&format!("{},{}\n", o.seed, o.report.overall()));
    }
    let accs: Vec<f64> = outcomes.iter().map(|o| o.report.overall()).collect();
    let (mean, std) = mean_std(&accs);
    summary.push_str(&format!("mean,{mean}\nstd,{std}\n"));
    write(&out.join("summary.csv"), &summary)?;
    Ok(outcomes)
}
