//! Accuracy matrix, continual-learning metrics and multi-run aggregation.
//!
//! `acc(j, k)` is the accuracy of the model snapshot taken after task `j` on
//! the test samples whose class was seen by task `k` (`k ≤ j`). From it:
//!
//! * `A_k = acc(k, k)`, `A_Avg = (1/K) Σ A_k`
//! * global forgetting `F_G(k) = A_{k-1} − A_k`, zero for `k = 1`
//! * task forgetting for the step into task `k`: `A_{k-1} − acc(k, k-1)`,
//!   zero for `k = 1`
//!
//! Both averages divide by `K`. Negative forgetting is kept as is.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynnan::DynNan;
use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};

const EVAL_CHUNK: usize = 512;

/// Lower-triangular accuracy table; rows and columns are 1-based task indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(k: usize) -> Self {
        Self { rows: (1..=k).map(|j| vec![None; j]).collect() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (j, row) in rows.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(Error::Metric(format!("row {} has {} entries, expected {}", j + 1, row.len(), j + 1)));
            }
        }
        let m = Self { rows: rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect() };
        m.check_range()?;
        Ok(m)
    }

    fn check_range(&self) -> Result<()> {
        for v in self.rows.iter().flatten().flatten() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Metric(format!("accuracy {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, j: usize, k: usize, acc: f64) -> Result<()> {
        if k == 0 || k > j || j > self.rows.len() {
            return Err(Error::Metric(format!("cell ({j}, {k}) outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Metric(format!("accuracy {acc} outside [0, 1]")));
        }
        self.rows[j - 1][k - 1] = Some(acc);
        Ok(())
    }

    pub fn get(&self, j: usize, k: usize) -> Option<f64> {
        self.rows.get(j.checked_sub(1)?)?.get(k.checked_sub(1)?).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().flatten().all(Option::is_some)
    }

    /// Complete rows as plain numbers.
    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(j, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, v)| v.ok_or_else(|| Error::Metric(format!("cell ({}, {}) is missing", j + 1, k + 1))))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub last_task_accuracy: f64,
    pub average_accuracy: f64,
    pub avg_global_forgetting: f64,
    pub avg_task_forgetting: f64,
    pub accuracy: Vec<f64>,
    pub global_forgetting: Vec<f64>,
    pub task_forgetting: Vec<f64>,
}

pub fn compute_metrics(matrix: &AccuracyMatrix) -> Result<RunMetrics> {
    let rows = matrix.to_rows()?;
    let k = rows.len();
    if k == 0 {
        return Err(Error::Metric("accuracy matrix has no tasks".into()));
    }
    let accuracy: Vec<f64> = rows.iter().enumerate().map(|(j, row)| row[j]).collect();
    let mut global_forgetting = vec![0.0; k];
    let mut task_forgetting = vec![0.0; k];
    for j in 1..k {
        global_forgetting[j] = accuracy[j - 1] - accuracy[j];
        task_forgetting[j] = accuracy[j - 1] - rows[j][j - 1];
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
    Ok(RunMetrics {
        last_task_accuracy: accuracy[k - 1],
        average_accuracy: mean(&accuracy),
        avg_global_forgetting: mean(&global_forgetting),
        avg_task_forgetting: mean(&task_forgetting),
        accuracy,
        global_forgetting,
        task_forgetting,
    })
}

/// Mean and sample standard deviation (`n − 1`; zero for a single run).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }

    /// Renders a fraction as a percentage, e.g. `89.90 ±0.18`.
    pub fn percent(&self) -> String {
        format!("{:.2} ±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.percent())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub last_task_accuracy: MeanStd,
    pub average_accuracy: MeanStd,
    pub avg_global_forgetting: MeanStd,
    pub avg_task_forgetting: MeanStd,
    pub accuracy: Vec<MeanStd>,
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<AggregateMetrics> {
    let first = runs.first().ok_or_else(|| Error::Aggregation("no runs to aggregate".into()))?;
    let k = first.accuracy.len();
    if let Some(r) = runs.iter().find(|r| r.accuracy.len() != k) {
        return Err(Error::Aggregation(format!("runs disagree on task count: {k} vs {}", r.accuracy.len())));
    }
    let field = |f: fn(&RunMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateMetrics {
        runs: runs.len(),
        last_task_accuracy: field(|r| r.last_task_accuracy),
        average_accuracy: field(|r| r.average_accuracy),
        avg_global_forgetting: field(|r| r.avg_global_forgetting),
        avg_task_forgetting: field(|r| r.avg_task_forgetting),
        accuracy: (0..k).map(|i| MeanStd::of(&runs.iter().map(|r| r.accuracy[i]).collect::<Vec<_>>())).collect(),
    })
}

/// Predictions of one snapshot on the test samples of the given classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `(true label, predicted class)` per eligible test sample, in store order.
    pub pairs: Vec<(u16, u16)>,
}

impl Predictions {
    pub fn compute(model: &DynNan<f32>, store: &EmbeddingStore, seen: &BTreeSet<u16>) -> Result<Self> {
        if let Some(c) = seen.iter().find(|&&c| model.column_of(c).is_none()) {
            return Err(Error::Evaluation(format!("class {c} was seen but the model has no output for it")));
        }
        let eligible: Vec<_> = store.test().filter(|r| seen.contains(&r.label)).collect();
        let dim = store.dim();
        let chunks: Vec<Vec<(u16, u16)>> = eligible
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut flat = Vec::with_capacity(chunk.len() * dim);
                for r in chunk {
                    flat.extend_from_slice(&r.vector);
                }
                let x = ArrayView2::from_shape((chunk.len(), dim), &flat).expect("dense chunk");
                let predicted = model.predict_batch(x)?;
                Ok(chunk.iter().map(|r| r.label).zip(predicted).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs: chunks.into_iter().flatten().collect() })
    }

    /// Accuracy over the samples whose label is in `classes`.
    pub fn accuracy_on(&self, classes: &BTreeSet<u16>) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for &(label, pred) in &self.pairs {
            if classes.contains(&label) {
                total += 1;
                hit += usize::from(label == pred);
            }
        }
        if total == 0 {
            return Err(Error::Evaluation("no test samples for the seen classes".into()));
        }
        Ok(hit as f64 / total as f64)
    }
}

/// Fraction of test samples with a label in `seen` that the model classifies correctly.
pub fn evaluate_snapshot(model: &DynNan<f32>, store: &EmbeddingStore, seen: &BTreeSet<u16>) -> Result<f64> {
    Predictions::compute(model, store, seen)?.accuracy_on(seen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn constant_matrix() {
        let m = compute_metrics(&matrix(vec![vec![0.8], vec![0.8, 0.8], vec![0.8, 0.8, 0.8]])).unwrap();
        assert!((m.average_accuracy - 0.8).abs() < 1e-15);
        assert_eq!(m.avg_global_forgetting, 0.0);
        assert_eq!(m.avg_task_forgetting, 0.0);
    }

    #[test]
    fn decreasing_diagonal() {
        let m = compute_metrics(&matrix(vec![vec![0.9], vec![0.85, 0.8], vec![0.7, 0.75, 0.7]])).unwrap();
        assert!((m.avg_global_forgetting - 0.2 / 3.0).abs() < 1e-12);
        assert_eq!(m.global_forgetting[0], 0.0);
        assert_eq!(m.task_forgetting[0], 0.0);
        // (0 + (0.9 - 0.85) + (0.8 - 0.75)) / 3
        assert!((m.avg_task_forgetting - 0.1 / 3.0).abs() < 1e-12);
        assert_eq!(m.last_task_accuracy, 0.7);
    }

    #[test]
    fn negative_forgetting_is_kept() {
        let m = compute_metrics(&matrix(vec![vec![0.5], vec![0.6, 0.7]])).unwrap();
        assert!(m.avg_global_forgetting < 0.0);
        assert!(m.avg_task_forgetting < 0.0);
    }

    #[test]
    fn incomplete_matrix() {
        let mut m = AccuracyMatrix::new(2);
        m.set(1, 1, 0.5).unwrap();
        assert!(matches!(compute_metrics(&m), Err(Error::Metric(_))));
        assert!(m.set(1, 2, 0.5).is_err());
        assert!(m.set(2, 1, 1.5).is_err());
    }

    #[test]
    fn aggregation() {
        let run = |a: f64| compute_metrics(&matrix(vec![vec![a]])).unwrap();
        let agg = aggregate_runs(&[run(0.6), run(0.8)]).unwrap();
        assert!((agg.last_task_accuracy.mean - 0.7).abs() < 1e-12);
        assert!((agg.last_task_accuracy.std - 0.02f64.sqrt()).abs() < 1e-12);
        let single = aggregate_runs(&[run(0.6)]).unwrap();
        assert_eq!(single.last_task_accuracy, MeanStd { mean: 0.6, std: 0.0 });
        let two = compute_metrics(&matrix(vec![vec![0.5], vec![0.5, 0.5]])).unwrap();
        assert!(matches!(aggregate_runs(&[run(0.6), two]), Err(Error::Aggregation(_))));
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn percent_format() {
        assert_eq!(MeanStd { mean: 0.899, std: 0.0018 }.percent(), "89.90 ±0.18");
    }
}
