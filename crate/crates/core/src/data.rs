//! In-memory datasets and deterministic mini-batching.

use numcore::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// How tasks map onto label columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// One label column predicted by every exit.
    MultiExit,
    /// One label column per task.
    MultiTask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    /// Label columns, each of length `rows`.
    pub labels: Vec<Vec<usize>>,
    /// Class count per label column.
    pub classes: Vec<usize>,
    pub mode: LabelMode,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<Vec<usize>>,
    pub mode: LabelMode,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn task_labels(&self, task: usize) -> &[usize] {
        match self.mode {
            LabelMode::MultiExit => &self.labels[0],
            LabelMode::MultiTask => &self.labels[task],
        }
    }
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<Vec<usize>>,
        classes: Vec<usize>,
        mode: LabelMode,
    ) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        if labels.is_empty() || labels.len() != classes.len() {
            return contract("one class count per label column is required");
        }
        if mode == LabelMode::MultiExit && labels.len() != 1 {
            return contract("multi-exit data carries exactly one label column");
        }
        for (col, (l, &c)) in labels.iter().zip(&classes).enumerate() {
            if l.len() != rows {
                return contract(format!(
                    "label column {col} has {} rows, expected {rows}",
                    l.len()
                ));
            }
            if let Some(bad) = l.iter().find(|&&v| v >= c) {
                return contract(format!("label {bad} in column {col} exceeds {c} classes"));
            }
        }
        Ok(Self {
            features,
            labels,
            classes,
            mode,
        })
    }

    pub fn rows(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes_for_task(&self, task: usize) -> usize {
        match self.mode {
            LabelMode::MultiExit => self.classes[0],
            LabelMode::MultiTask => self.classes[task],
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.features.select_rows(idx)?,
            labels: self
                .labels
                .iter()
                .map(|l| idx.iter().map(|&i| l[i]).collect())
                .collect(),
            mode: self.mode,
        })
    }

    pub fn subset_dataset(&self, idx: &[usize]) -> Result<Dataset> {
        let b = self.subset(idx)?;
        Dataset::new(b.x, b.labels, self.classes.clone(), self.mode)
    }

    /// The whole dataset as a single batch.
    pub fn full_batch(&self) -> Result<Batch> {
        self.subset(&(0..self.rows()).collect::<Vec<_>>())
    }

    /// Shuffled mini-batches; the last one may be short.
    pub fn batches(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return contract("batch size must be positive");
        }
        let order = rng.permutation(self.rows());
        order.chunks(batch_size).map(|c| self.subset(c)).collect()
    }

    /// Splits rows into consecutive fractions after a seeded shuffle.
    pub fn split(&self, fractions: &[f64], rng: &mut Rng) -> Result<Vec<Dataset>> {
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
            return contract(format!(
                "split fractions {fractions:?} must be nonnegative and sum to 1"
            ));
        }
        let order = rng.permutation(self.rows());
        let n = self.rows();
        let mut out = Vec::with_capacity(fractions.len());
        let mut start = 0;
        let mut acc = 0.0;
        for (i, f) in fractions.iter().enumerate() {
            acc += f;
            let end = if i + 1 == fractions.len() {
                n
            } else {
                ((acc * n as f64).round() as usize).min(n)
            };
            if end <= start {
                return contract(format!("split {i} would be empty"));
            }
            out.push(self.subset_dataset(&order[start..end])?);
            start = end;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let x = Tensor::new(vec![5, 2], (0..10).map(f64::from).collect()).unwrap();
        Dataset::new(x, vec![vec![0, 1, 0, 1, 1]], vec![2], LabelMode::MultiExit).unwrap()
    }

    #[test]
    fn batches_cover_every_row_once() {
        let d = tiny();
        let bs = d.batches(2, &mut Rng::new(3)).unwrap();
        assert_eq!(
            bs.iter().map(Batch::rows).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        let mut firsts: Vec<f64> = bs
            .iter()
            .flat_map(|b| b.x.data().iter().step_by(2).copied().collect::<Vec<_>>())
            .collect();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn split_respects_fractions() {
        let d = tiny();
        let parts = d.split(&[0.6, 0.4], &mut Rng::new(1)).unwrap();
        assert_eq!(parts[0].rows() + parts[1].rows(), 5);
        assert_eq!(parts[0].rows(), 3);
        assert!(d.split(&[0.6, 0.6], &mut Rng::new(1)).is_err());
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(Dataset::new(x, vec![vec![0, 3]], vec![2], LabelMode::MultiExit).is_err());
    }
}
