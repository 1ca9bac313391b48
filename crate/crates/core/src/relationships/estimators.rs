use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{enumerate_pairwise, RelationshipMatrix, RelationshipMethod};
use crate::datasets::{Batch, MultiTaskDataset, Split};
use crate::diffcore::{forward, sgd_step, ParameterStore, Partition};
use crate::error::{Error, Result};
use crate::metrics::MetricSpec;
use crate::model::{ArchitectureConfig, MtlModel, RouteId, RouteWeights};
use crate::strategies::{loss_and_gradient, StrategyKind};
use crate::trainer::{evaluate_split, train_run, BatchProbe, TrainOptions, TrainerConfig};

/// Batches between look-ahead / gradient-angle samples during a run.
pub const LOOKAHEAD_EVERY: usize = 10;

fn primary_weights(n: usize) -> RouteWeights {
    (0..n).map(|t| (RouteId::Primary(t), 1.0)).collect()
}

fn task_losses(model: &MtlModel, params: &ParameterStore, batch: &Batch) -> Result<Vec<f64>> {
    let lg = model.loss_graph(&primary_weights(model.num_tasks()))?;
    let eval = forward(&lg.graph, params, &batch.inputs)?;
    (0..model.num_tasks())
        .map(|t| eval.value(lg.route_losses[&RouteId::Primary(t)]).item())
        .collect()
}

/// `score[s][t] = L_t(θ) − L_t(θ − η∇L_s)`: positive when a step on `s`
/// lowers the loss of `t`. Returns the training-batch and validation-batch
/// variants.
pub fn lookahead_loss(
    model: &MtlModel,
    train: &Batch,
    val: &Batch,
    eta: f64,
) -> Result<(RelationshipMatrix, RelationshipMatrix)> {
    let n = model.num_tasks();
    let names: Vec<String> = model.tasks().iter().map(|t| t.name.clone()).collect();
    let mut on_train = RelationshipMatrix::new(RelationshipMethod::LookaheadTrain, names.clone(), false);
    let mut on_val = RelationshipMatrix::new(RelationshipMethod::LookaheadVal, names, false);
    let before_train = task_losses(model, &model.params, train)?;
    let before_val = task_losses(model, &model.params, val)?;
    for s in 0..n {
        let weights = RouteWeights::from([(RouteId::Primary(s), 1.0)]);
        let (_, grads, _) = loss_and_gradient(model, &model.params, &weights, train)?;
        let mut stepped = model.params.clone();
        sgd_step(&mut stepped, &grads, eta)?;
        let after_train = task_losses(model, &stepped, train)?;
        let after_val = task_losses(model, &stepped, val)?;
        for t in (0..n).filter(|&t| t != s) {
            on_train.scores[s][t] = Some(before_train[t] - after_train[t]);
            on_val.scores[s][t] = Some(before_val[t] - after_val[t]);
        }
    }
    Ok((on_train, on_val))
}

/// Angle in `[0, π]` between two vectors; `None` if either is zero.
pub fn vector_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0).acos())
}

/// Angle in `[0, π]` between two tasks' shared-parameter gradients;
/// `None` when either gradient vanishes.
pub fn gradient_angle(model: &MtlModel, batch: &Batch) -> Result<RelationshipMatrix> {
    let shared = model.params.ids_where(|p| p == Partition::Shared);
    if shared.is_empty() {
        return Err(Error::Config("gradient angle needs a shared partition".into()));
    }
    let n = model.num_tasks();
    let mut flat = Vec::with_capacity(n);
    for t in 0..n {
        let weights = RouteWeights::from([(RouteId::Primary(t), 1.0)]);
        let (_, grads, _) = loss_and_gradient(model, &model.params, &weights, batch)?;
        flat.push(
            shared
                .iter()
                .flat_map(|id| grads[id].values().iter().copied())
                .collect::<Vec<f64>>(),
        );
    }
    let names = model.tasks().iter().map(|t| t.name.clone()).collect();
    let mut m = RelationshipMatrix::new(RelationshipMethod::GradientAngle, names, true);
    for s in 0..n {
        for t in s + 1..n {
            let angle = vector_angle(&flat[s], &flat[t]);
            m.scores[s][t] = angle;
            m.scores[t][s] = angle;
        }
    }
    Ok(m)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

/// Samples look-ahead losses and gradient angles every `every` batches of
/// a run; [`RelationshipProbe::finish`] reports per-cell medians.
pub struct RelationshipProbe {
    every: usize,
    samples: BTreeMap<RelationshipMethod, Vec<RelationshipMatrix>>,
}

impl RelationshipProbe {
    pub fn new(every: usize) -> Self {
        Self {
            every: every.max(1),
            samples: BTreeMap::new(),
        }
    }

    pub fn num_samples(&self) -> usize {
        self.samples.values().map(Vec::len).max().unwrap_or(0)
    }

    pub fn finish(self, seed: u64) -> Result<Vec<RelationshipMatrix>> {
        let mut out = Vec::new();
        for (method, samples) in self.samples {
            let first = &samples[0];
            let n = first.num_tasks();
            let mut m = RelationshipMatrix::new(method, first.task_names.clone(), first.lower_is_better);
            for s in 0..n {
                for t in 0..n {
                    m.scores[s][t] = median(samples.iter().filter_map(|x| x.scores[s][t]).collect());
                }
            }
            m.seeds = vec![seed];
            out.push(m);
        }
        if out.is_empty() {
            return Err(Error::Contract("relationship probe collected no samples".into()));
        }
        Ok(out)
    }
}

impl BatchProbe for RelationshipProbe {
    fn observe(&mut self, step: usize, model: &MtlModel, train: &Batch, val: &Batch, eta: f64) -> Result<()> {
        if !step.is_multiple_of(self.every) {
            return Ok(());
        }
        let (lt, lv) = lookahead_loss(model, train, val, eta)?;
        let ga = gradient_angle(model, train)?;
        for m in [lt, lv, ga] {
            self.samples.entry(m.method).or_default().push(m);
        }
        Ok(())
    }
}

/// Trains a shared-bottom equal-weighting model on all tasks while probing;
/// returns look-ahead (train, validation) and gradient-angle matrices.
pub fn probe_shared_bottom(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
    every: usize,
) -> Result<Vec<RelationshipMatrix>> {
    let mut probe = RelationshipProbe::new(every);
    let config = config.with_strategy(StrategyKind::Equal);
    train_run(
        dataset,
        &arch.shared_bottom(),
        &config,
        TrainOptions {
            probe: Some(&mut probe),
            ..Default::default()
        },
    )?;
    probe.finish(config.seed)
}

fn head_arch(arch: &ArchitectureConfig) -> ArchitectureConfig {
    ArchitectureConfig {
        input_dim: arch.hidden_width,
        total_encoder_depth: 2,
        shared_depth: 0,
        ..arch.clone()
    }
}

/// Train an STL model on each source, freeze its encoder, then fit a fresh
/// two-layer transfer head plus decoder on each target. `score[s][t]` is
/// the target's first validation metric; the diagonal holds the
/// self-transfer control.
pub fn feature_transfer_similarity(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
) -> Result<RelationshipMatrix> {
    let n = dataset.num_tasks();
    let stl_arch = arch.with_shared_depth(0);
    let config = config.with_strategy(StrategyKind::Equal);
    let head = head_arch(arch);
    let rows = (0..n)
        .into_par_iter()
        .map(|s| {
            let wrap = |e: Error| Error::Run {
                run: format!("transfer:{}", dataset.tasks[s].name),
                source: Box::new(e),
            };
            let single = dataset.subset_tasks(&[s]).map_err(wrap)?;
            let stl = train_run(&single, &stl_arch, &config, TrainOptions::default()).map_err(wrap)?;
            let features = stl.checkpoint.model.encode(0, &dataset.features).map_err(wrap)?;
            let mut row = Vec::with_capacity(n);
            for t in 0..n {
                let mut target = dataset.subset_tasks(&[t]).map_err(wrap)?;
                target.features = features.clone();
                let run = train_run(&target, &head, &config, TrainOptions::default()).map_err(wrap)?;
                let eval = evaluate_split(&run.checkpoint.model, &target, Split::Val).map_err(wrap)?;
                let metric = &eval.metrics[0][0];
                row.push((Some(metric.value), metric.spec.clone()));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let lower = rows
        .first()
        .and_then(|r| r.first())
        .is_none_or(|(_, spec): &(Option<f64>, MetricSpec)| spec.lower_is_better);
    let mut m = RelationshipMatrix::new(RelationshipMethod::FeatureTransfer, dataset.task_names(), lower);
    for (s, row) in rows.into_iter().enumerate() {
        m.scores[s] = row.into_iter().map(|(v, _)| v).collect();
    }
    m.seeds = vec![config.seed];
    m.runs = n + n * n;
    m.validate()?;
    Ok(m)
}

/// A named way of producing relationship matrices for a dataset.
pub trait RelationshipEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(
        &self,
        dataset: &MultiTaskDataset,
        arch: &ArchitectureConfig,
        config: &TrainerConfig,
    ) -> Result<Vec<RelationshipMatrix>>;
}

struct Enumeration;
struct Lookahead;
struct GradAngle;
struct Feature;

impl RelationshipEstimator for Enumeration {
    fn name(&self) -> &str {
        "enum"
    }
    fn estimate(
        &self,
        d: &MultiTaskDataset,
        a: &ArchitectureConfig,
        c: &TrainerConfig,
    ) -> Result<Vec<RelationshipMatrix>> {
        Ok(vec![enumerate_pairwise(d, a, c)?])
    }
}

impl RelationshipEstimator for Lookahead {
    fn name(&self) -> &str {
        "lookahead"
    }
    fn estimate(
        &self,
        d: &MultiTaskDataset,
        a: &ArchitectureConfig,
        c: &TrainerConfig,
    ) -> Result<Vec<RelationshipMatrix>> {
        let all = probe_shared_bottom(d, a, c, LOOKAHEAD_EVERY)?;
        Ok(all
            .into_iter()
            .filter(|m| m.method != RelationshipMethod::GradientAngle)
            .collect())
    }
}

impl RelationshipEstimator for GradAngle {
    fn name(&self) -> &str {
        "gradangle"
    }
    fn estimate(
        &self,
        d: &MultiTaskDataset,
        a: &ArchitectureConfig,
        c: &TrainerConfig,
    ) -> Result<Vec<RelationshipMatrix>> {
        let all = probe_shared_bottom(d, a, c, LOOKAHEAD_EVERY)?;
        Ok(all
            .into_iter()
            .filter(|m| m.method == RelationshipMethod::GradientAngle)
            .collect())
    }
}

impl RelationshipEstimator for Feature {
    fn name(&self) -> &str {
        "feature"
    }
    fn estimate(
        &self,
        d: &MultiTaskDataset,
        a: &ArchitectureConfig,
        c: &TrainerConfig,
    ) -> Result<Vec<RelationshipMatrix>> {
        Ok(vec![feature_transfer_similarity(d, a, c)?])
    }
}

/// Name → estimator table (`enum`, `lookahead`, `gradangle`, `feature`).
pub struct EstimatorRegistry {
    estimators: BTreeMap<String, Box<dyn RelationshipEstimator>>,
}

impl EstimatorRegistry {
    pub fn builtin() -> Self {
        let mut r = Self {
            estimators: BTreeMap::new(),
        };
        r.register(Box::new(Enumeration));
        r.register(Box::new(Lookahead));
        r.register(Box::new(GradAngle));
        r.register(Box::new(Feature));
        r
    }

    pub fn register(&mut self, estimator: Box<dyn RelationshipEstimator>) {
        self.estimators.insert(estimator.name().to_owned(), estimator);
    }

    pub fn get(&self, name: &str) -> Result<&dyn RelationshipEstimator> {
        self.estimators
            .get(name)
            .map(|e| e.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown relationship method `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.estimators.keys().map(String::as_str)
    }
}
