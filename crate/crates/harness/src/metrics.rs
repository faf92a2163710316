use std::fmt::Write as _;

use advxfer_core::datagen::Dataset;
use advxfer_core::model::Classifier;
use advxfer_core::strategies::argmax;
use advxfer_core::tensor::{Graph, Scalar};
use advxfer_core::{Error, Result};

const EVAL_BATCH: usize = 64;

pub const METRICS_HEADER: &str = "scope,key,count,correct,accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct Tally {
    pub key: String,
    pub count: usize,
    pub correct: usize,
}

impl Tally {
    /// `None` when the group is empty.
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub total: usize,
    pub correct: usize,
    pub per_class: Vec<Tally>,
    /// In first-appearance order of the test set.
    pub per_container: Vec<Tally>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn overall(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn container_accuracy(&self, id: &str) -> Option<f64> {
        self.per_container.iter().find(|t| t.key == id).and_then(Tally::accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        let mut row = |scope: &str, t: &Tally| {
            let acc = t.accuracy().map_or(String::new(), |a| a.to_string());
            writeln!(out, "{scope},{},{},{},{acc}", t.key, t.count, t.correct).unwrap();
        };
        row(
            "overall",
            &Tally {
                key: "all".into(),
                count: self.total,
                correct: self.correct,
            },
        );
        for t in &self.per_class {
            row("class", t);
        }
        for t in &self.per_container {
            row("container", t);
        }
        for (i, r) in self.confusion.iter().enumerate() {
            for (j, n) in r.iter().enumerate() {
                writeln!(out, "confusion,{}>{},{n},,", self.class_names[i], self.class_names[j]).unwrap();
            }
        }
        out
    }
}

/// Builds the report from predicted labels, one per test sample.
pub fn report_from_predictions(test: &Dataset, predictions: &[usize]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::config("cannot evaluate on an empty test set"));
    }
    if predictions.len() != test.len() {
        return Err(Error::config(format!(
            "{} predictions for {} test samples",
            predictions.len(),
            test.len()
        )));
    }
    let k = test.num_classes();
    let mut confusion = vec![vec![0; k]; k];
    let mut per_container: Vec<Tally> = Vec::new();
    for (s, &p) in test.samples.iter().zip(predictions) {
        if p >= k {
            return Err(Error::config(format!("prediction {p} out of range for {k} classes")));
        }
        confusion[s.label][p] += 1;
        let slot = match per_container.iter().position(|t| t.key == s.meta.container_id) {
            Some(i) => i,
            None => {
                per_container.push(Tally {
                    key: s.meta.container_id.clone(),
                    count: 0,
                    correct: 0,
                });
                per_container.len() - 1
            }
        };
        per_container[slot].count += 1;
        per_container[slot].correct += usize::from(p == s.label);
    }
    let per_class = (0..k)
        .map(|c| Tally {
            key: test.class_names[c].clone(),
            count: confusion[c].iter().sum(),
            correct: confusion[c][c],
        })
        .collect();
    Ok(MetricsReport {
        class_names: test.class_names.clone(),
        total: test.len(),
        correct: (0..k).map(|c| confusion[c][c]).sum(),
        per_class,
        per_container,
        confusion,
    })
}

/// Eval-mode argmax predictions; ties go to the lowest class index.
pub fn predict<T: Scalar, C: Classifier<T>>(model: &C, test: &Dataset) -> Result<Vec<usize>> {
    let k = model.num_classes();
    let mut out = Vec::with_capacity(test.len());
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = test.batch::<T>(chunk);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let logits = model.logits(&mut g, xv)?;
        out.extend(g.value(logits).values().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar, C: Classifier<T>>(model: &C, test: &Dataset) -> Result<MetricsReport> {
    if model.num_classes() != test.num_classes() {
        return Err(Error::config(format!(
            "model predicts {} classes but the test set has {}",
            model.num_classes(),
            test.num_classes()
        )));
    }
    if test.is_empty() {
        return Err(Error::config("cannot evaluate on an empty test set"));
    }
    report_from_predictions(test, &predict(model, test)?)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
