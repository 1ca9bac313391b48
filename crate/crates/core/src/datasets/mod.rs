//! Multi-task datasets: a common feature matrix, per-task labels, and
//! train/validation/test index splits.

mod csv;
mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use self::csv::{load_csv, CsvSchema, CsvTask, CsvTaskKind};
pub use synthetic::{generate_planted_asymmetric, generate_symmetric_positive, SyntheticSpec};

use crate::diffcore::{Inputs, Tensor};
use crate::error::{Error, Result};
use crate::model::{label_key, TaskKind, TaskSpec};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitSpec {
    /// `(train, val, test)` sizes: validation and test are floored, train takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {fr:?} must be in [0,1] and sum to 1"
            )));
        }
        let floor = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
        let (val, test) = (floor(self.val), floor(self.test));
        Ok((n - val - test, val, test))
    }

    /// Shuffles `0..n` with `seed` and cuts it into splits.
    pub fn split(&self, n: usize, seed: u64) -> Result<Splits> {
        let (train, val, _) = self.sizes(n)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, "split"));
        let test = order.split_off(train + val);
        let val = order.split_off(train);
        Ok(Splits {
            train: order,
            val,
            test,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Inputs for one mini-batch: `x` plus one `y{t}` label tensor per task.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Inputs,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskDataset {
    pub features: Tensor,
    pub labels: Vec<Tensor>,
    pub splits: Splits,
    pub tasks: Vec<TaskSpec>,
    /// Noise-free targets, when the generator knows them.
    pub clean_labels: Option<Vec<Tensor>>,
}

impl MultiTaskDataset {
    pub fn new(features: Tensor, labels: Vec<Tensor>, splits: Splits, tasks: Vec<TaskSpec>) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            splits,
            tasks,
            clean_labels: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_samples();
        if self.features.shape().len() != 2 {
            return Err(Error::Dimension("features must be (N, input_dim)".into()));
        }
        if self.labels.len() != self.tasks.len() {
            return Err(Error::Config("one label tensor per task required".into()));
        }
        for (t, (y, spec)) in self.labels.iter().zip(&self.tasks).enumerate() {
            if spec.id != t {
                return Err(Error::Config(format!(
                    "task ids must be dense; position {t} has {}",
                    spec.id
                )));
            }
            let ok = match spec.kind {
                TaskKind::Classification { num_classes } => {
                    y.len() == n
                        && y.values()
                            .iter()
                            .all(|&v| v >= 0.0 && v.fract() == 0.0 && (v as usize) < num_classes)
                }
                TaskKind::Regression { output_dim } => y.shape() == [n, output_dim],
            };
            if !ok {
                return Err(Error::Dimension(format!(
                    "labels of task `{}` inconsistent with spec",
                    spec.name
                )));
            }
        }
        let mut seen = vec![false; n];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!(
                    "splits must be disjoint indices below {n}; bad index {i}"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("splits must cover every row".into()));
        }
        if !self.features.all_finite() || self.labels.iter().any(|y| !y.all_finite()) {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), self.features.select_rows(rows)?);
        for (t, y) in self.labels.iter().enumerate() {
            inputs.insert(label_key(t), y.select_rows(rows)?);
        }
        Ok(Batch {
            inputs,
            rows: rows.len(),
        })
    }

    pub fn split_batch(&self, split: Split) -> Result<Batch> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Err(Error::Config(format!("{split:?} split is empty")));
        }
        self.batch(idx)
    }

    /// Dataset restricted to the given tasks, renumbered `0..k` in that order.
    pub fn subset_tasks(&self, tasks: &[usize]) -> Result<MultiTaskDataset> {
        let mut specs = Vec::with_capacity(tasks.len());
        for (i, &t) in tasks.iter().enumerate() {
            let mut spec = self
                .tasks
                .get(t)
                .ok_or_else(|| Error::Config(format!("no task {t}")))?
                .clone();
            spec.id = i;
            specs.push(spec);
        }
        Ok(MultiTaskDataset {
            features: self.features.clone(),
            labels: tasks.iter().map(|&t| self.labels[t].clone()).collect(),
            splits: self.splits.clone(),
            tasks: specs,
            clean_labels: self
                .clean_labels
                .as_ref()
                .map(|c| tasks.iter().map(|&t| c[t].clone()).collect()),
        })
    }
}
