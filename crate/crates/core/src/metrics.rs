//! Accuracy matrix and continual-learning summary metrics.
//!
//! `P[j][i]` is the test accuracy on task `i` after training task `j`,
//! stored as a fraction and defined only for `i ≤ j`.
//!
//! * ACC = mean of the final row.
//! * FWT = mean over `i < T` of `P[i][i] − m[i]`, with `m` a per-task
//!   reference accuracy (joint training by default).
//! * BWT = mean over `i < T` of `P[T][i] − P[i][i]`.
//! * SMT = mean over `j < T` of the population variance of column `j`
//!   from row `j` down.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, ModelState};

/// Where reference accuracies came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    Joint,
    SingleTask,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub values: Vec<Option<f64>>,
    pub source: ReferenceSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    task_count: usize,
    /// Row `j` holds accuracies on tasks `0..=j`.
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(task_count: usize) -> Self {
        AccuracyMatrix {
            task_count,
            rows: Vec::with_capacity(task_count),
        }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn completed_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.task_count
    }

    /// Accuracy on task `i` after training task `j`.
    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        self.rows.get(j).and_then(|r| r.get(i)).copied()
    }

    /// Appends the row for the next trained task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let j = self.rows.len();
        if j >= self.task_count {
            return Err(Error::State(format!(
                "accuracy matrix already has all {} rows",
                self.task_count
            )));
        }
        if row.len() != j + 1 {
            return Err(Error::shape(format!(
                "row {j} needs {} entries, got {}",
                j + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::config(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    fn final_row(&self, metric: &'static str) -> Result<&[f64]> {
        if !self.is_complete() || self.task_count == 0 {
            return Err(Error::State(format!(
                "{metric} needs the final row ({} of {} rows present)",
                self.rows.len(),
                self.task_count
            )));
        }
        Ok(&self.rows[self.task_count - 1])
    }

    fn require_two_tasks(&self, metric: &'static str) -> Result<()> {
        if self.task_count < 2 {
            return Err(Error::UndefinedMetric {
                metric,
                reason: format!("needs at least two tasks, have {}", self.task_count),
            });
        }
        Ok(())
    }
}

/// Accuracies of `model` on the test sets of tasks `0..=j`, each through its
/// own head.
pub fn evaluate_row(model: &ModelState, test_sets: &[&Dataset], j: usize) -> Result<Vec<f64>> {
    (0..=j)
        .map(|i| {
            let test = test_sets
                .get(i)
                .ok_or_else(|| Error::config(format!("task {i} has no test set")))?;
            nn::accuracy(model, test.images.view(), &test.labels, i)
        })
        .collect()
}

pub fn acc(p: &AccuracyMatrix) -> Result<f64> {
    let row = p.final_row("ACC")?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

pub fn fwt(p: &AccuracyMatrix, reference: &[Option<f64>]) -> Result<f64> {
    p.require_two_tasks("FWT")?;
    let t = p.task_count();
    let mut total = 0.0;
    for i in 0..t - 1 {
        let diag = p.get(i, i).ok_or_else(|| {
            Error::State(format!("FWT needs P[{i}][{i}], which is not recorded yet"))
        })?;
        let m = reference
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::config(format!("FWT reference accuracy missing for task {i}")))?;
        total += diag - m;
    }
    Ok(total / (t - 1) as f64)
}

pub fn bwt(p: &AccuracyMatrix) -> Result<f64> {
    p.require_two_tasks("BWT")?;
    let last = p.final_row("BWT")?;
    let t = p.task_count();
    let total: f64 = (0..t - 1).map(|i| last[i] - p.rows[i][i]).sum();
    Ok(total / (t - 1) as f64)
}

/// Population variance (two-pass).
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn smt(p: &AccuracyMatrix) -> Result<f64> {
    p.require_two_tasks("SMT")?;
    p.final_row("SMT")?;
    let t = p.task_count();
    let total: f64 = (0..t - 1)
        .map(|j| {
            let column: Vec<f64> = (j..t).map(|k| p.rows[k][j]).collect();
            population_variance(&column)
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Metrics that could be computed; undefined ones are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: Option<f64>,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
    pub smt: Option<f64>,
}

impl MetricSummary {
    pub fn compute(p: &AccuracyMatrix, reference: Option<&Reference>) -> Self {
        MetricSummary {
            acc: acc(p).ok(),
            fwt: reference.and_then(|r| fwt(p, &r.values).ok()),
            bwt: bwt(p).ok(),
            smt: smt(p).ok(),
        }
    }

    /// Bitwise equality, treating absent metrics as equal to each other.
    pub fn bitwise_eq(&self, other: &MetricSummary) -> bool {
        let bits = |v: Option<f64>| v.map(f64::to_bits);
        bits(self.acc) == bits(other.acc)
            && bits(self.fwt) == bits(other.fwt)
            && bits(self.bwt) == bits(other.bwt)
            && bits(self.smt) == bits(other.smt)
    }
}
