//! Frozen-prefix sweep, source-budget sweep and the six-strategy comparison.

use std::fmt::Write as _;

use advxfer_core::model::NUM_BLOCKS;
use advxfer_core::strategies::{StrategyKind, StrategySpec};
use advxfer_core::Result;

use crate::metrics::{mean_std, MetricsReport};
use crate::run::Runner;

pub const EPS_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];
/// Frozen prefix used by the source-budget sweep.
pub const SWEEP_EPS_L: usize = 1;
pub const SWEEP_HEADER: &str = "strategy,L,eps_s,eps_t,seed,accuracy,status";

/// One grid point for one seed, or the mean over seeds when `seed` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub strategy: StrategyKind,
    pub frozen_prefix: usize,
    pub eps_s: Option<f64>,
    pub eps_t: Option<f64>,
    pub seed: Option<u64>,
    /// `None` when the run (or every run, for a mean row) failed.
    pub accuracy: Option<f64>,
    /// `ok`, or the failure.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepTable {
    pub fn seed_rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.seed.is_some())
    }

    pub fn mean_rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.seed.is_none())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
            writeln!(
                out,
                "{},{},{},{},{seed},{},{}",
                r.strategy.name(),
                r.frozen_prefix,
                opt(r.eps_s),
                opt(r.eps_t),
                opt(r.accuracy),
                csv_field(&r.status)
            )
            .unwrap();
        }
        out
    }
}

/// Runs every spec for every seed and appends a mean row after each spec's seeds.
fn sweep(runner: &Runner<'_>, specs: &[StrategySpec], seeds: &[u64]) -> SweepTable {
    let cells: Vec<(usize, u64)> = (0..specs.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let results = runner.par_map(cells.clone(), |(i, seed)| runner.evaluate_cell(&specs[i], seed));
    let row = |spec: &StrategySpec, seed, accuracy, status: String| SweepRow {
        strategy: spec.kind,
        frozen_prefix: spec.frozen_prefix,
        eps_s: spec.source_budget.map(|b| b.epsilon),
        eps_t: spec.target_budget.map(|b| b.epsilon),
        seed,
        accuracy,
        status,
    };
    let mut rows = Vec::new();
    let mut results = results.into_iter();
    for spec in specs {
        let mut accs = Vec::new();
        for &seed in seeds {
            match results.next().expect("one result per cell") {
                Ok(report) => {
                    accs.push(report.overall());
                    rows.push(row(spec, Some(seed), Some(report.overall()), "ok".into()));
                }
                Err(e) => rows.push(row(spec, Some(seed), None, format!("error: {e}"))),
            }
        }
        let failed = seeds.len() - accs.len();
        let (mean, status) = match (accs.is_empty(), failed) {
            (true, _) => (None, "error: every seed failed".to_string()),
            (false, 0) => (Some(mean_std(&accs).0), "ok".to_string()),
            (false, n) => (Some(mean_std(&accs).0), format!("partial: {n} of {} seeds failed", seeds.len())),
        };
        rows.push(row(spec, None, mean, status));
    }
    SweepTable { rows }
}

/// ST_FT test accuracy for `L = 0..=4`.
pub fn sweep_l(runner: &Runner<'_>, seeds: &[u64]) -> SweepTable {
    let specs: Vec<StrategySpec> = (0..=NUM_BLOCKS)
        .map(|l| StrategySpec::resolve(StrategyKind::StFt, None, None, l))
        .collect();
    sweep(runner, &specs, seeds)
}

/// AT_FT test accuracy at `L = 1` for each source budget in `grid`.
pub fn sweep_epsilon(runner: &Runner<'_>, grid: &[f64], seeds: &[u64]) -> SweepTable {
    let specs: Vec<StrategySpec> = grid
        .iter()
        .map(|&e| StrategySpec::resolve(StrategyKind::AtFt, Some(e), None, SWEEP_EPS_L))
        .collect();
    sweep(runner, &specs, seeds)
}

/// Source budget with the highest mean accuracy; ties go to the one listed first.
pub fn best_epsilon(table: &SweepTable) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for r in table.mean_rows() {
        if let (Some(eps), Some(acc)) = (r.eps_s, r.accuracy) {
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((eps, acc));
            }
        }
    }
    best.map(|(e, _)| e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub strategy: StrategyKind,
    /// Mean and standard deviation over successful seeds, per container.
    pub per_container: Vec<Option<(f64, f64)>>,
    pub overall: Option<(f64, f64)>,
    /// Overall accuracy of each successful seed, in seed order.
    pub seed_accuracies: Vec<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub containers: Vec<String>,
    pub rows: Vec<CompareRow>,
}

fn cell(v: Option<(f64, f64)>) -> String {
    v.map_or("n/a".to_string(), |(m, s)| format!("{:.4}±{:.4}", m, s))
}

impl CompareTable {
    pub fn row(&self, kind: StrategyKind) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.strategy == kind)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["strategy".to_string()];
        h.extend(self.containers.iter().cloned());
        h.push("overall".into());
        h
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut c = vec![r.strategy.name().to_string()];
                c.extend(r.per_container.iter().map(|v| cell(*v)));
                c.push(cell(r.overall));
                c
            })
            .collect()
    }

    /// Header `strategy,<container ids>,overall`; cells are `mean±std`.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in self.cells() {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut table = vec![self.header()];
        table.extend(self.cells());
        let cols = table[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &table {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, w))| {
                    let pad = w - v.chars().count();
                    if i == 0 {
                        format!("{v}{}", " ".repeat(pad))
                    } else {
                        format!("{}{v}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// All six strategies with the configured `L`, `eps_s` and `eps_t`,
/// reported per held-out container.
pub fn compare_strategies(runner: &Runner<'_>, seeds: &[u64]) -> Result<CompareTable> {
    let e = &runner.config.experiment;
    let specs: Vec<StrategySpec> = StrategyKind::ALL
        .iter()
        .map(|&k| StrategySpec::resolve(k, e.eps_s, e.eps_t, e.frozen_prefix))
        .collect();
    for s in &specs {
        s.validate()?;
    }
    let containers = runner.data.test.container_ids();
    let cells: Vec<(usize, u64)> = (0..specs.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let mut results = runner
        .par_map(cells, |(i, seed)| runner.evaluate_cell(&specs[i], seed))
        .into_iter();
    let rows = specs
        .iter()
        .map(|spec| {
            let mut reports: Vec<MetricsReport> = Vec::new();
            let mut failures = Vec::new();
            for &seed in seeds {
                match results.next().expect("one result per cell") {
                    Ok(r) => reports.push(r),
                    Err(err) => failures.push(format!("seed {seed}: {err}")),
                }
            }
            let summarize = |vals: Vec<f64>| (!vals.is_empty()).then(|| mean_std(&vals));
            let per_container = containers
                .iter()
                .map(|c| summarize(reports.iter().filter_map(|r| r.container_accuracy(c)).collect()))
                .collect();
            let seed_accuracies: Vec<f64> = reports.iter().map(MetricsReport::overall).collect();
            CompareRow {
                strategy: spec.kind,
                per_container,
                overall: summarize(seed_accuracies.clone()),
                seed_accuracies,
                failures,
            }
        })
        .collect();
    Ok(CompareTable { containers, rows })
}
