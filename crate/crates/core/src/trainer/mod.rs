//! Training loops: STL baselines, shared-bottom / half-shared multi-task
//! runs under any registered strategy, checkpoint selection and batch
//! runtime measurement.
//!
//! Seed streams (see [`crate::rng`]): `init/<role>` for parameters,
//! `batch` for training order, `val-batch` for the cyclic validation
//! iterator and `pcgrad` for projection order.

mod history;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use history::{read_history_jsonl, write_history_jsonl, EpochRecord, EpochTiming, TrainingHistory};

use crate::datasets::{Batch, MultiTaskDataset, Split};
use crate::diffcore::{cosine_lr, forward, sgd_step};
use crate::error::{Error, Result};
use crate::metrics::{relative_improvement, task_metrics, ImprovementReport, TaskMetrics};
use crate::model::{build_model, ArchitectureConfig, MtlModel, RouteId, RouteWeights};
use crate::rng;
use crate::strategies::{CoefficientSet, StepContext, StrategyInit, StrategyKind, StrategyRegistry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Initial learning rate of the cosine schedule.
    pub eta0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate for learned task coefficients.
    pub omega_lr: f64,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub dwa_temperature: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            epochs: 30,
            batch_size: 32,
            omega_lr: 1e-4,
            seed: 0,
            strategy: StrategyKind::Equal,
            dwa_temperature: 2.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.eta0 > 0.0) || !(self.omega_lr > 0.0) || !(self.dwa_temperature > 0.0) {
            return Err(Error::Config(
                "eta0, omega_lr and dwa_temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn with_strategy(&self, strategy: StrategyKind) -> Self {
        Self {
            strategy,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Observer called once per training batch before the committed step.
pub trait BatchProbe {
    fn observe(&mut self, step: usize, model: &MtlModel, train: &Batch, val: &Batch, eta: f64) -> Result<()>;
}

/// Single-task reference performance of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StlBaseline {
    pub task: String,
    pub val: TaskMetrics,
    pub test: TaskMetrics,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// STL references for validation Δ; without them checkpoints are
    /// selected by lowest validation loss.
    pub baselines: Option<&'a [StlBaseline]>,
    /// Enumeration coefficients for `saal_e` / `saal_ew`.
    pub enumeration: Option<CoefficientSet>,
    pub probe: Option<&'a mut dyn BatchProbe>,
    /// Defaults to [`StrategyRegistry::builtin`].
    pub registry: Option<&'a StrategyRegistry>,
}

/// Best epoch of a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: MtlModel,
    pub validation: Option<ImprovementReport>,
}

pub struct TrainedRun {
    pub model: MtlModel,
    pub history: TrainingHistory,
    pub checkpoint: Checkpoint,
}

/// Per-task losses and metrics of a model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub losses: Vec<f64>,
    pub metrics: Vec<TaskMetrics>,
}

pub fn evaluate_split(model: &MtlModel, dataset: &MultiTaskDataset, split: Split) -> Result<SplitEvaluation> {
    let batch = dataset.split_batch(split)?;
    let weights: RouteWeights = (0..model.num_tasks()).map(|t| (RouteId::Primary(t), 1.0)).collect();
    let lg = model.loss_graph(&weights)?;
    let eval = forward(&lg.graph, &model.params, &batch.inputs)?;
    let mut losses = Vec::with_capacity(model.num_tasks());
    let mut metrics = Vec::with_capacity(model.num_tasks());
    for (t, spec) in model.tasks().iter().enumerate() {
        losses.push(eval.value(lg.route_losses[&RouteId::Primary(t)]).item()?);
        let pred = model.predict_primary(t, &batch.inputs["x"])?;
        metrics.push(task_metrics(&pred, &batch.inputs[&crate::model::label_key(t)], spec)?);
    }
    Ok(SplitEvaluation { losses, metrics })
}

/// Δ of `model` on `split` against the STL baselines.
pub fn improvement_on(
    model: &MtlModel,
    dataset: &MultiTaskDataset,
    baselines: &[StlBaseline],
    split: Split,
) -> Result<ImprovementReport> {
    let eval = evaluate_split(model, dataset, split)?;
    let stl: Vec<TaskMetrics> = baselines
        .iter()
        .map(|b| match split {
            Split::Test => b.test.clone(),
            _ => b.val.clone(),
        })
        .collect();
    relative_improvement(&eval.metrics, &stl, &dataset.task_names())
}

/// Index of the epoch with the highest selection score; ties go to the earliest.
pub fn select_checkpoint(records: &[EpochRecord]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if best.is_none_or(|(_, s)| r.selection_score > s) {
            best = Some((i, r.selection_score));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Contract("cannot select a checkpoint from an empty history".into()))
}

/// Cycles through shuffled validation indices, reshuffling every pass.
struct CyclicBatches {
    indices: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl CyclicBatches {
    fn new(indices: &[usize], batch_size: usize, mut rng: ChaCha8Rng) -> Self {
        let mut indices = indices.to_vec();
        indices.shuffle(&mut rng);
        Self {
            indices,
            pos: 0,
            batch_size,
            rng,
        }
    }

    fn next_rows(&mut self) -> Vec<usize> {
        if self.pos >= self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.indices.len());
        let rows = self.indices[self.pos..end].to_vec();
        self.pos = end;
        rows
    }
}

fn check_inputs(dataset: &MultiTaskDataset, arch: &ArchitectureConfig, config: &TrainerConfig) -> Result<()> {
    config.validate()?;
    arch.validate()?;
    dataset.validate()?;
    if arch.input_dim != dataset.input_dim() {
        return Err(Error::Config(format!(
            "architecture input_dim {} does not match dataset width {}",
            arch.input_dim,
            dataset.input_dim()
        )));
    }
    for split in [Split::Train, Split::Val] {
        if dataset.indices(split).is_empty() {
            return Err(Error::Config(format!("{split:?} split is empty")));
        }
    }
    Ok(())
}

/// Trains one model on `dataset` with `config.strategy`.
pub fn train_run(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
    options: TrainOptions<'_>,
) -> Result<TrainedRun> {
    check_inputs(dataset, arch, config)?;
    let TrainOptions {
        baselines,
        enumeration,
        mut probe,
        registry,
    } = options;
    if let Some(b) = baselines {
        if b.len() != dataset.num_tasks() {
            return Err(Error::Config(format!(
                "{} STL baselines for {} tasks",
                b.len(),
                dataset.num_tasks()
            )));
        }
    }
    let builtin;
    let registry = match registry {
        Some(r) => r,
        None => {
            builtin = StrategyRegistry::builtin();
            &builtin
        }
    };
    let init = StrategyInit {
        num_tasks: dataset.num_tasks(),
        enumeration,
        omega_lr: config.omega_lr,
        dwa_temperature: config.dwa_temperature,
    };
    let mut strategy = registry.create(config.strategy.name(), &init)?;
    let mut model = build_model(arch, &dataset.tasks, config.seed)?;

    let mut batch_rng = rng::stream(config.seed, "batch");
    let mut pc_rng = rng::stream(config.seed, "pcgrad");
    let mut val_iter = CyclicBatches::new(
        dataset.indices(Split::Val),
        config.batch_size,
        rng::stream(config.seed, "val-batch"),
    );
    let mut train_order = dataset.indices(Split::Train).to_vec();
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, MtlModel, Option<ImprovementReport>)> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let wrap = |e: Error| Error::Training {
            epoch,
            source: Box::new(e),
        };
        let eta = cosine_lr(epoch, config.epochs, config.eta0)?;
        train_order.shuffle(&mut batch_rng);
        let mut sums: BTreeMap<RouteId, (f64, usize)> = BTreeMap::new();
        let mut batch_seconds = Vec::new();
        for rows in train_order.chunks(config.batch_size) {
            let train = dataset.batch(rows).map_err(wrap)?;
            let val = dataset.batch(&val_iter.next_rows()).map_err(wrap)?;
            if let Some(p) = probe.as_deref_mut() {
                p.observe(step, &model, &train, &val, eta).map_err(wrap)?;
            }
            let start = Instant::now();
            let out = strategy
                .step(StepContext {
                    model: &model,
                    train: &train,
                    val: &val,
                    eta,
                    rng: &mut pc_rng,
                })
                .map_err(wrap)?;
            sgd_step(&mut model.params, &out.grads, eta).map_err(wrap)?;
            batch_seconds.push(start.elapsed().as_secs_f64());
            for (r, l) in out.route_losses {
                let e = sums.entry(r).or_insert((0.0, 0));
                e.0 += l;
                e.1 += 1;
            }
            step += 1;
        }
        let mean_losses: BTreeMap<RouteId, f64> = sums.into_iter().map(|(r, (s, n))| (r, s / n as f64)).collect();
        strategy.end_epoch(&mean_losses).map_err(wrap)?;

        let val_eval = evaluate_split(&model, dataset, Split::Val).map_err(wrap)?;
        let report = match baselines {
            Some(b) => {
                let stl: Vec<TaskMetrics> = b.iter().map(|b| b.val.clone()).collect();
                Some(relative_improvement(&val_eval.metrics, &stl, &dataset.task_names()).map_err(wrap)?)
            }
            None => None,
        };
        let val_loss: f64 = val_eval.losses.iter().sum();
        let selection_score = report.as_ref().map_or(-val_loss, |r| r.delta_mtl);
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: eta,
            train_losses: mean_losses.into_iter().map(|(r, l)| (r.to_string(), l)).collect(),
            val_losses: val_eval.losses,
            val_metrics: val_eval.metrics,
            val_delta_mtl: report.as_ref().map(|r| r.delta_mtl),
            selection_score,
            coefficients: strategy.coefficients(),
        });
        let total: f64 = batch_seconds.iter().sum();
        history.timing.push(EpochTiming {
            mean_batch_seconds: total / batch_seconds.len() as f64,
            batch_seconds,
        });
        if best.as_ref().is_none_or(|(s, ..)| selection_score > *s) {
            best = Some((selection_score, epoch, model.clone(), report));
        }
        log::debug!(
            "{} epoch {epoch}: lr {eta:.4} score {selection_score:.4}",
            strategy.name()
        );
    }
    let (_, epoch, best_model, validation) = best.expect("at least one epoch");
    Ok(TrainedRun {
        model,
        history,
        checkpoint: Checkpoint {
            epoch,
            model: best_model,
            validation,
        },
    })
}

/// Trains one single-task model per task (no sharing, equal weighting) and
/// records the validation and test metrics of each best checkpoint.
pub fn train_stl_baselines(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
) -> Result<Vec<StlBaseline>> {
    let stl_arch = arch.with_shared_depth(0);
    let stl_config = config.with_strategy(StrategyKind::Equal);
    (0..dataset.num_tasks())
        .into_par_iter()
        .map(|t| {
            let single = dataset.subset_tasks(&[t])?;
            let run = train_run(&single, &stl_arch, &stl_config, TrainOptions::default()).map_err(|e| Error::Run {
                run: format!("stl:{}", dataset.tasks[t].name),
                source: Box::new(e),
            })?;
            let best = &run.checkpoint.model;
            Ok(StlBaseline {
                task: dataset.tasks[t].name.clone(),
                val: evaluate_split(best, &single, Split::Val)?.metrics.remove(0),
                test: evaluate_split(best, &single, Split::Test)?.metrics.remove(0),
            })
        })
        .collect()
}

/// Outcome of a full run scored against STL baselines on the test split.
pub struct EvaluatedRun {
    pub run: TrainedRun,
    pub test: ImprovementReport,
}

pub fn train_and_evaluate(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
    baselines: &[StlBaseline],
    enumeration: Option<CoefficientSet>,
) -> Result<EvaluatedRun> {
    let options = TrainOptions {
        baselines: Some(baselines),
        enumeration,
        ..Default::default()
    };
    let run = train_run(dataset, arch, config, options)?;
    let test = improvement_on(&run.checkpoint.model, dataset, baselines, Split::Test)?;
    Ok(EvaluatedRun { run, test })
}

/// Wall-clock seconds of `samples` training batches after `warmup` untimed ones.
pub fn time_batches(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
    enumeration: Option<CoefficientSet>,
    warmup: usize,
    samples: usize,
) -> Result<Vec<f64>> {
    if warmup == 0 || samples == 0 {
        return Err(Error::Config("warmup and samples must be at least 1".into()));
    }
    check_inputs(dataset, arch, config)?;
    let init = StrategyInit {
        num_tasks: dataset.num_tasks(),
        enumeration,
        omega_lr: config.omega_lr,
        dwa_temperature: config.dwa_temperature,
    };
    let mut strategy = StrategyRegistry::builtin().create(config.strategy.name(), &init)?;
    let mut model = build_model(arch, &dataset.tasks, config.seed)?;
    let mut pc_rng = rng::stream(config.seed, "pcgrad");
    let mut val_iter = CyclicBatches::new(
        dataset.indices(Split::Val),
        config.batch_size,
        rng::stream(config.seed, "val-batch"),
    );
    let mut train_iter = CyclicBatches::new(
        dataset.indices(Split::Train),
        config.batch_size,
        rng::stream(config.seed, "batch"),
    );
    let mut times = Vec::with_capacity(samples);
    for i in 0..warmup + samples {
        let train = dataset.batch(&train_iter.next_rows())?;
        let val = dataset.batch(&val_iter.next_rows())?;
        let start = Instant::now();
        let out = strategy.step(StepContext {
            model: &model,
            train: &train,
            val: &val,
            eta: config.eta0,
            rng: &mut pc_rng,
        })?;
        sgd_step(&mut model.params, &out.grads, config.eta0)?;
        if i >= warmup {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(times)
}

/// Mean batch time of `config.strategy` divided by that of equal weighting
/// under identical conditions.
pub fn measure_batch_runtime(
    dataset: &MultiTaskDataset,
    arch: &ArchitectureConfig,
    config: &TrainerConfig,
    enumeration: Option<CoefficientSet>,
    warmup: usize,
    samples: usize,
) -> Result<f64> {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let equal = mean(time_batches(
        dataset,
        arch,
        &config.with_strategy(StrategyKind::Equal),
        None,
        warmup,
        samples,
    )?);
    let this = mean(time_batches(dataset, arch, config, enumeration, warmup, samples)?);
    Ok(this / equal)
}
