//! Directed task relationships: the pairwise enumeration oracle and the
//! look-ahead, gradient-angle and feature-transfer estimators, compared by
//! Spearman rank correlation.
//!
//! `score[s][t]` is the effect of source `s` on target `t`.

mod estimators;
mod spearman;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use estimators::{
    feature_transfer_similarity, gradient_angle, lookahead_loss, probe_shared_bottom, vector_angle, EstimatorRegistry,
    RelationshipEstimator, RelationshipProbe, LOOKAHEAD_EVERY,
};
pub use spearman::{average_ranks, spearman, spearman_rho, CorrelationReport};

use crate::datasets::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::model::ArchitectureConfig;
use crate::trainer::{train_run, train_stl_baselines, StlBaseline, TrainOptions, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationshipMethod {
    Enumeration,
    LookaheadTrain,
    LookaheadVal,
    GradientAngle,
    FeatureTransfer,
}

impl RelationshipMethod {
    pub fn name(self) -> &'static str {
        match self {
            RelationshipMethod::Enumeration => "enumeration",
            RelationshipMethod::LookaheadTrain => "lookahead_train",
            RelationshipMethod::LookaheadVal => "lookahead_val",
            RelationshipMethod::GradientAngle => "gradient_angle",
            RelationshipMethod::FeatureTransfer => "feature_transfer",
        }
    }
}

impl fmt::Display for RelationshipMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationshipMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use RelationshipMethod::*;
        [
            Enumeration,
            LookaheadTrain,
            LookaheadVal,
            GradientAngle,
            FeatureTransfer,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown relationship method `{s}`")))
    }
}

/// Raw performances behind an enumeration matrix: `single[t]` is `A_t^{t}`,
/// `pair[s][t]` is `A_t^{s,t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationDetail {
    pub single: Vec<f64>,
    pub pair: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationshipMatrix {
    pub method: RelationshipMethod,
    pub seeds: Vec<u64>,
    pub task_names: Vec<String>,
    /// `scores[s][t]`; `None` marks the reserved diagonal or an undefined cell.
    pub scores: Vec<Vec<Option<f64>>>,
    /// Whether a smaller score means a more helpful source.
    pub lower_is_better: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enumeration: Option<EnumerationDetail>,
    /// Training runs performed to produce the matrix.
    #[serde(default)]
    pub runs: usize,
}

impl RelationshipMatrix {
    pub fn new(method: RelationshipMethod, task_names: Vec<String>, lower_is_better: bool) -> Self {
        let n = task_names.len();
        Self {
            method,
            seeds: Vec::new(),
            task_names,
            scores: vec![vec![None; n]; n],
            lower_is_better,
            enumeration: None,
            runs: 0,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn score(&self, source: usize, target: usize) -> Option<f64> {
        self.scores.get(source).and_then(|r| r.get(target)).copied().flatten()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_tasks();
        if self.scores.len() != n || self.scores.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("relationship matrix must be {n}x{n}")));
        }
        if self.scores.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("relationship scores must be finite".into()));
        }
        Ok(())
    }

    /// Cell-wise mean over matrices of the same method and tasks (e.g. seeds);
    /// a cell is `None` only if it is `None` everywhere.
    pub fn mean(matrices: &[RelationshipMatrix]) -> Result<RelationshipMatrix> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::Contract("no matrices to average".into()))?;
        if matrices
            .iter()
            .any(|m| m.method != first.method || m.task_names != first.task_names)
        {
            return Err(Error::Config(
                "cannot average matrices of different methods or tasks".into(),
            ));
        }
        let n = first.num_tasks();
        let avg = |cells: Vec<Option<f64>>| {
            let vals: Vec<f64> = cells.into_iter().flatten().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mut out = RelationshipMatrix::new(first.method, first.task_names.clone(), first.lower_is_better);
        for s in 0..n {
            for t in 0..n {
                out.scores[s][t] = avg(matrices.iter().map(|m| m.scores[s][t]).collect());
            }
        }
        out.seeds = matrices.iter().flat_map(|m| m.seeds.iter().copied()).collect();
        out.runs = matrices.iter().map(|m| m.runs).sum();
        if let Some(details) = matrices
            .iter()
            .map(|m| m.enumeration.as_ref())
            .collect::<Option<Vec<_>>>()
        {
            let single = (0..n).map(|t| details.iter().map(|d| d.single[t]).sum::<f64>() / details.len() as f64);
            let pair = (0..n)
                .map(|s| {
                    (0..n)
                        .map(|t| avg(details.iter().map(|d| d.pair[s][t]).collect()))
                        .collect()
                })
                .collect();
            out.enumeration = Some(EnumerationDetail {
                single: single.collect(),
                pair,
            });
        }
        Ok(out)
    }

    /// Aligned text table: rows are sources, columns targets.
    pub fn to_heatmap(&self) -> String {
        let width = self.task_names.iter().map(String::len).max().unwrap_or(0).max(9);
        let mut out = format!("{} (row = source, column = target)\n{:>width$}", self.method, "");
        for name in &self.task_names {
            out.push_str(&format!(" {name:>width$}"));
        }
        out.push('\n');
        for (s, row) in self.scores.iter().enumerate() {
            out.push_str(&format!("{:>width$}", self.task_names[s]));
            for cell in row {
                match cell {
                    Some(v) => out.push_str(&format!(" {v:>+width$.3}")),
                    None => out.push_str(&format!(" {:>width$}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Ground-truth directed relationships from fully trained models: one STL
/// model per task and one shared-bottom model per unordered pair.
/// `score[s][t]` is the validation Δ of `t` when trained with `s`.
pub fn enumerate_pairwise(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
) -> Result<RelationshipMatrix> {
    let baselines = train_stl_baselines(dataset, arch, config)?;
    let mut m = enumerate_pairwise_with(dataset, arch, config, &baselines)?;
    m.runs += dataset.num_tasks();
    Ok(m)
}

/// [`enumerate_pairwise`] reusing existing STL baselines.
pub fn enumerate_pairwise_with(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
    baselines: &[StlBaseline],
) -> Result<RelationshipMatrix> {
    let n = dataset.num_tasks();
    if n < 2 {
        return Err(Error::Config("enumeration needs at least two tasks".into()));
    }
    if baselines.len() != n {
        return Err(Error::Config(format!(
            "{} STL baselines for {n} tasks",
            baselines.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let sb = arch.shared_bottom();
    let config = config.with_strategy(crate::strategies::StrategyKind::Equal);
    let results = pairs
        .par_iter()
        .map(|&(a, b)| {
            let name = format!("pair:{}+{}", dataset.tasks[a].name, dataset.tasks[b].name);
            let wrap = |e: Error| Error::Run {
                run: name.clone(),
                source: Box::new(e),
            };
            let pair = dataset.subset_tasks(&[a, b]).map_err(wrap)?;
            let stl = [baselines[a].clone(), baselines[b].clone()];
            let run = train_run(
                &pair,
                &sb,
                &config,
                TrainOptions {
                    baselines: Some(&stl),
                    ..Default::default()
                },
            )
            .map_err(wrap)?;
            let report = run.checkpoint.validation.expect("baselines supplied");
            Ok(((a, b), (report.per_task[0], report.per_task[1])))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut m = RelationshipMatrix::new(RelationshipMethod::Enumeration, dataset.task_names(), false);
    let mut pair = vec![vec![None; n]; n];
    for ((a, b), (delta_a, delta_b)) in results {
        pair[b][a] = Some(delta_a);
        pair[a][b] = Some(delta_b);
    }
    // The STL model is the reference for Δ, so A_t^{t} = 0.
    m.scores = pair.clone();
    m.enumeration = Some(EnumerationDetail {
        single: vec![0.0; n],
        pair,
    });
    m.seeds = vec![config.seed];
    m.runs = pairs.len();
    m.validate()?;
    Ok(m)
}
