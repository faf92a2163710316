use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advxfer_core::datagen::write_datasets;
use advxfer_core::model::load_checkpoint;
use advxfer_core::tensor::ScalarMode;
use advxfer_core::{Error, Result};
use advxfer_harness::sweep::{best_epsilon, compare_strategies, sweep_epsilon, sweep_l, EPS_GRID};
use advxfer_harness::{evaluate, exit_code, parse_seeds, run_experiment, Datasets, ExperimentConfig, Runner};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advxfer", about = "Adversarial transfer learning for container filling-level classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target datasets and write them to --out.
    GenData(Common),
    /// Train (or fetch) the cached source model of a transfer strategy.
    Pretrain(Common),
    /// Run one strategy for every seed.
    Train(Common),
    /// ST_FT accuracy for L = 0..4.
    SweepL(Common),
    /// AT_FT accuracy at L = 1 over the source-budget grid.
    SweepEps {
        #[command(flatten)]
        common: Common,
        /// Comma-separated budgets.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// All six strategies, per held-out container.
    Compare(Common),
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long = "l")]
    l: Option<usize>,
    #[arg(long)]
    eps_s: Option<f64>,
    #[arg(long)]
    eps_t: Option<f64>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Inclusive range `N..M`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let e = &mut c.experiment;
        if let Some(v) = &self.split {
            e.split = v.clone();
        }
        if let Some(v) = &self.strategy {
            e.strategy = v.clone();
        }
        if let Some(v) = self.l {
            e.frozen_prefix = v;
        }
        if self.eps_s.is_some() {
            e.eps_s = self.eps_s;
        }
        if self.eps_t.is_some() {
            e.eps_t = self.eps_t;
        }
        if let Some(s) = self.seed {
            e.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            e.seeds = parse_seeds(s)?;
        }
        if let Some(v) = &self.out {
            e.out = v.clone();
        }
        if let Some(v) = self.jobs {
            c.run.jobs = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let mut c = common.resolve()?;
            c.data.dir = None;
            let data = Datasets::prepare(&c, true)?;
            let source = data.source.as_ref().expect("generated");
            let root = &c.experiment.out;
            write_datasets(root, &[source, &data.train, &data.test])?;
            println!(
                "wrote {} source, {} train and {} test images to {}",
                source.len(),
                data.train.len(),
                data.test.len(),
                root.display()
            );
        }
        Command::Pretrain(common) => {
            let c = common.resolve()?;
            let spec = c.spec()?;
            let kind = spec
                .source_kind()
                .ok_or_else(|| Error::config(format!("{} has no source phase", spec.kind)))?;
            let data = Datasets::prepare(&c, true)?;
            let runner = Runner::new(&c, &data);
            let source = data.source.as_ref().expect("prepared with source");
            let rc = c.run_config(c.experiment.seeds[0])?;
            let outcome = match c.precision()? {
                ScalarMode::Single => {
                    runner
                        .cache
                        .get_or_train::<f32>(source, kind, spec.source_budget.as_ref(), &rc)?
                        .2
                }
                ScalarMode::Double => {
                    runner
                        .cache
                        .get_or_train::<f64>(source, kind, spec.source_budget.as_ref(), &rc)?
                        .2
                }
            };
            let eps = spec.source_budget.map_or(0.0, |b| b.epsilon);
            let key = advxfer_core::strategies::PretrainCache::key(kind, eps, rc.source.seed);
            println!("{:?}: {}", outcome, runner.cache.path_for(&key).display());
        }
        Command::Train(common) => {
            let c = common.resolve()?;
            for o in run_experiment(&c)? {
                println!("seed {}: accuracy {:.4}", o.seed, o.report.overall());
            }
        }
        Command::SweepL(common) => {
            let c = common.resolve()?;
            let data = Datasets::prepare(&c, true)?;
            let table = sweep_l(&Runner::new(&c, &data), &c.experiment.seeds);
            let csv = table.to_csv();
            write(&c.experiment.out.join("sweep_l.csv"), &csv)?;
            print!("{csv}");
        }
        Command::SweepEps { common, grid } => {
            let c = common.resolve()?;
            let grid = grid.unwrap_or_else(|| EPS_GRID.to_vec());
            let data = Datasets::prepare(&c, true)?;
            let table = sweep_epsilon(&Runner::new(&c, &data), &grid, &c.experiment.seeds);
            let csv = table.to_csv();
            write(&c.experiment.out.join("sweep_eps.csv"), &csv)?;
            print!("{csv}");
            match best_epsilon(&table) {
                Some(e) => println!("best eps_s: {e}"),
                None => println!("best eps_s: none (every grid point failed)"),
            }
        }
        Command::Compare(common) => {
            let c = common.resolve()?;
            let data = Datasets::prepare(&c, true)?;
            let table = compare_strategies(&Runner::new(&c, &data), &c.experiment.seeds)?;
            write(&c.experiment.out.join("compare.csv"), &table.to_csv())?;
            let text = table.to_text();
            write(&c.experiment.out.join("compare.txt"), &text)?;
            print!("{text}");
            for r in &table.rows {
                for f in &r.failures {
                    eprintln!("{}: {f}", r.strategy);
                }
            }
        }
        Command::Eval { common, model } => {
            let c = common.resolve()?;
            let data = Datasets::prepare(&c, false)?;
            let report = match c.precision()? {
                ScalarMode::Single => evaluate(&load_checkpoint::<f32>(&model)?.0, &data.test)?,
                ScalarMode::Double => evaluate(&load_checkpoint::<f64>(&model)?.0, &data.test)?,
            };
            let csv = report.to_csv();
            write(&c.experiment.out.join("metrics.csv"), &csv)?;
            println!("accuracy {:.4}", report.overall());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
