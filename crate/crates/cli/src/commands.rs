use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use saal_core::datasets::MultiTaskDataset;
use saal_core::metrics::ImprovementReport;
use saal_core::model::save_checkpoint;
use saal_core::relationships::{
    enumerate_pairwise_with, spearman, CorrelationReport, EstimatorRegistry, RelationshipMatrix,
};
use saal_core::strategies::{saal_enumeration, CoefficientSet, StrategyKind};
use saal_core::trainer::{
    measure_batch_runtime, train_and_evaluate, train_stl_baselines, write_history_jsonl, StlBaseline,
};

use crate::config::ExperimentConfig;
use crate::Failure;

/// Turns a core error into an exit status: numeric failures are 3, bad
/// configuration discovered late is 2, anything else 1.
fn core(e: saal_core::Error) -> Failure {
    let code = if e.is_numeric() {
        3
    } else if matches!(e, saal_core::Error::Config(_)) {
        2
    } else {
        1
    };
    Failure { code, error: e.into() }
}

fn io(e: anyhow::Error) -> Failure {
    Failure { code: 1, error: e }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| io(e.into()))?;
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(io)
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(io)
}

/// Enumeration coefficients from the config file, or from a fresh oracle run on this seed.
fn enumeration_for(
    cfg: &ExperimentConfig,
    dataset: &MultiTaskDataset,
    seed: u64,
    baselines: &[StlBaseline],
) -> Result<(CoefficientSet, Option<RelationshipMatrix>), Failure> {
    if let Some(e) = cfg.load_enumeration().map_err(|e| Failure { code: 2, error: e })? {
        return Ok((e, None));
    }
    let trainer = cfg.trainer_for(seed).with_strategy(StrategyKind::Equal);
    let matrix = enumerate_pairwise_with(dataset, &cfg.architecture, &trainer, baselines).map_err(core)?;
    Ok((saal_enumeration(&matrix).map_err(core)?, Some(matrix)))
}

#[derive(Serialize, Deserialize)]
pub struct SeedReport {
    pub config: Value,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub checkpoint_epoch: usize,
    pub report: ImprovementReport,
}

#[derive(Serialize, Deserialize)]
pub struct MeanReport {
    pub config: Value,
    pub seeds: Vec<u64>,
    pub strategy: StrategyKind,
    pub report: ImprovementReport,
}

pub fn run(cfg: &ExperimentConfig) -> Result<(), Failure> {
    create_dir(&cfg.output_dir)?;
    let reports = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &reports {
        println!("seed {}\n{}", r.seed, r.report.to_table(r.strategy.name()));
    }
    let mean = ImprovementReport::mean(&reports.iter().map(|r| r.report.clone()).collect::<Vec<_>>()).map_err(core)?;
    println!(
        "mean over seeds {:?}\n{}",
        cfg.seeds,
        mean.to_table(cfg.strategy.name())
    );
    let out = MeanReport {
        config: cfg.to_json(),
        seeds: cfg.seeds.clone(),
        strategy: cfg.strategy,
        report: mean,
    };
    write_json(&cfg.output_dir.join("report_mean.json"), &out)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedReport, Failure> {
    let dir = cfg.output_dir.join(format!("seed{seed}"));
    create_dir(&dir)?;
    let meta = json!({ "config": cfg.to_json(), "seed": seed });
    let dataset = cfg.dataset.load(seed).map_err(core)?;
    let trainer = cfg.trainer_for(seed);
    let baselines = train_stl_baselines(&dataset, &cfg.architecture, &trainer).map_err(core)?;
    let enumeration = if cfg.strategy.needs_enumeration() {
        let (e, matrix) = enumeration_for(cfg, &dataset, seed, &baselines)?;
        write_json(
            &dir.join("enumeration.json"),
            &json!({ "config": cfg.to_json(), "seed": seed, "coefficients": e, "matrix": matrix }),
        )?;
        Some(e)
    } else {
        None
    };
    let evaluated = train_and_evaluate(&dataset, &cfg.architecture, &trainer, &baselines, enumeration).map_err(core)?;
    write_history_jsonl(dir.join("history.jsonl"), &meta, &evaluated.run.history).map_err(core)?;
    let mut ckpt_meta = meta.clone();
    ckpt_meta["epoch"] = evaluated.run.checkpoint.epoch.into();
    save_checkpoint(&dir.join("checkpoint.json"), &evaluated.run.checkpoint.model, ckpt_meta).map_err(core)?;
    let report = SeedReport {
        config: cfg.to_json(),
        seed,
        strategy: cfg.strategy,
        checkpoint_epoch: evaluated.run.checkpoint.epoch,
        report: evaluated.test,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Serialize, Deserialize)]
pub struct MatrixFile {
    pub config: Value,
    pub seeds: Vec<u64>,
    pub matrix: RelationshipMatrix,
}

#[derive(Serialize, Deserialize)]
pub struct CorrelationFile {
    pub config: Value,
    pub seeds: Vec<u64>,
    pub reference: String,
    pub candidate: String,
    pub correlation: CorrelationReport,
}

pub fn relationships(cfg: &ExperimentConfig, method: &str, out: &Path, against: Option<&Path>) -> Result<(), Failure> {
    let registry = EstimatorRegistry::builtin();
    let estimator = registry.get(method).map_err(|e| Failure {
        code: 2,
        error: e.into(),
    })?;
    let reference = match against {
        None => None,
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(io)?;
            let file: MatrixFile = serde_json::from_str(&text)
                .with_context(|| format!("{} is not a relationship matrix file", path.display()))
                .map_err(|e| Failure { code: 2, error: e })?;
            Some(file.matrix)
        }
    };
    create_dir(out)?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let dataset = cfg.dataset.load(seed).map_err(core)?;
            estimator
                .estimate(&dataset, &cfg.architecture, &cfg.trainer_for(seed))
                .map_err(core)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let kinds = per_seed[0].len();
    let mut matrices = Vec::with_capacity(kinds);
    for k in 0..kinds {
        let group: Vec<RelationshipMatrix> = per_seed.iter().map(|ms| ms[k].clone()).collect();
        matrices.push(RelationshipMatrix::mean(&group).map_err(core)?);
    }
    for m in &matrices {
        let name = m.method.name();
        print!("{}", m.to_heatmap());
        println!("trainings: {}", m.runs);
        let file = MatrixFile {
            config: cfg.to_json(),
            seeds: cfg.seeds.clone(),
            matrix: m.clone(),
        };
        write_json(&out.join(format!("{name}.json")), &file)?;
        fs::write(out.join(format!("{name}.txt")), m.to_heatmap()).map_err(|e| io(e.into()))?;
    }
    let mut pairs = Vec::new();
    if let Some(r) = &reference {
        pairs.extend(matrices.iter().map(|m| (r, m)));
    } else if matrices.len() >= 2 {
        pairs.extend(matrices[1..].iter().map(|m| (&matrices[0], m)));
    }
    for (i, (a, b)) in pairs.into_iter().enumerate() {
        let correlation = spearman(a, b).map_err(core)?;
        println!("{}", render_correlation(a.method.name(), b.method.name(), &correlation));
        let file = CorrelationFile {
            config: cfg.to_json(),
            seeds: cfg.seeds.clone(),
            reference: a.method.name().into(),
            candidate: b.method.name().into(),
            correlation,
        };
        let name = if i == 0 {
            "correlation.json".to_owned()
        } else {
            format!("correlation{i}.json")
        };
        write_json(&out.join(name), &file)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: StrategyKind,
    pub ratio: f64,
}

#[derive(Serialize, Deserialize)]
pub struct BenchFile {
    pub config: Value,
    pub seed: u64,
    pub warmup: usize,
    pub samples: usize,
    pub rows: Vec<BenchRow>,
}

pub fn bench(
    cfg: &ExperimentConfig,
    strategies: &[StrategyKind],
    warmup: usize,
    samples: usize,
) -> Result<(), Failure> {
    if warmup == 0 || samples == 0 {
        return Err(Failure {
            code: 2,
            error: anyhow!("warmup and samples must be at least 1"),
        });
    }
    create_dir(&cfg.output_dir)?;
    let seed = cfg.seeds[0];
    let dataset = cfg.dataset.load(seed).map_err(core)?;
    let trainer = cfg.trainer_for(seed);
    let enumeration = if strategies.iter().any(|k| k.needs_enumeration()) {
        let baselines = train_stl_baselines(&dataset, &cfg.architecture, &trainer).map_err(core)?;
        Some(enumeration_for(cfg, &dataset, seed, &baselines)?.0)
    } else {
        None
    };
    // Timed strictly one after another so the measurements do not compete.
    let mut rows = vec![BenchRow {
        strategy: StrategyKind::Equal,
        ratio: 1.0,
    }];
    for &kind in strategies.iter().filter(|&&k| k != StrategyKind::Equal) {
        let e = kind.needs_enumeration().then(|| enumeration.clone()).flatten();
        let ratio = measure_batch_runtime(
            &dataset,
            &cfg.architecture,
            &trainer.with_strategy(kind),
            e,
            warmup,
            samples,
        )
        .map_err(core)?;
        rows.push(BenchRow { strategy: kind, ratio });
    }
    let file = BenchFile {
        config: cfg.to_json(),
        seed,
        warmup,
        samples,
        rows,
    };
    print!("{}", render_bench(&file));
    write_json(&cfg.output_dir.join("bench.json"), &file)
}

#[derive(Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub shared_depth: usize,
    pub strategy: StrategyKind,
    pub task_names: Vec<String>,
    pub per_task: Vec<f64>,
    pub delta_mtl: f64,
}

#[derive(Serialize, Deserialize)]
pub struct SweepFile {
    pub config: Value,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

pub fn sweep_shared_depth(cfg: &ExperimentConfig) -> Result<(), Failure> {
    create_dir(&cfg.output_dir)?;
    let depth = cfg.architecture.total_encoder_depth;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<ImprovementReport>, Failure> {
            let dataset = cfg.dataset.load(seed).map_err(core)?;
            let trainer = cfg.trainer_for(seed);
            let baselines = train_stl_baselines(&dataset, &cfg.architecture, &trainer).map_err(core)?;
            let (enumeration, _) = enumeration_for(cfg, &dataset, seed, &baselines)?;
            let jobs: Vec<(usize, StrategyKind)> = (0..=depth)
                .flat_map(|d| [(d, StrategyKind::Equal), (d, StrategyKind::SaalE)])
                .collect();
            jobs.par_iter()
                .map(|&(d, kind)| {
                    let arch = cfg.architecture.with_shared_depth(d);
                    let e = kind.needs_enumeration().then(|| enumeration.clone());
                    train_and_evaluate(&dataset, &arch, &trainer.with_strategy(kind), &baselines, e)
                        .map(|r| r.test)
                        .map_err(core)
                })
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (i, (d, kind)) in (0..=depth)
        .flat_map(|d| [(d, StrategyKind::Equal), (d, StrategyKind::SaalE)])
        .enumerate()
    {
        let group: Vec<ImprovementReport> = per_seed.iter().map(|reports| reports[i].clone()).collect();
        let mean = ImprovementReport::mean(&group).map_err(core)?;
        rows.push(SweepRow {
            shared_depth: d,
            strategy: kind,
            task_names: mean.task_names.clone(),
            per_task: mean.per_task.clone(),
            delta_mtl: mean.delta_mtl,
        });
    }
    let file = SweepFile {
        config: cfg.to_json(),
        seeds: cfg.seeds.clone(),
        rows,
    };
    print!("{}", render_sweep(&file));
    write_json(&cfg.output_dir.join("sweep.json"), &file)
}

fn render_correlation(a: &str, b: &str, c: &CorrelationReport) -> String {
    let mut out = format!("spearman({a}, {b})\n");
    for (name, rho) in c.task_names.iter().zip(&c.per_target) {
        let _ = writeln!(out, "  {name:<12} {}", fmt_opt(*rho));
    }
    let _ = writeln!(out, "  {:<12} {}", "mean", fmt_opt(c.mean));
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_owned(), |x| format!("{x:+.3}"))
}

fn render_bench(b: &BenchFile) -> String {
    let mut out = format!(
        "batch time relative to equal (seed {}, {} warmup, {} timed batches)\n",
        b.seed, b.warmup, b.samples
    );
    for row in &b.rows {
        let _ = writeln!(out, "  {:<12} {:>6.2}", row.strategy.name(), row.ratio);
    }
    out
}

fn render_sweep(s: &SweepFile) -> String {
    let names = s.rows.first().map(|r| r.task_names.clone()).unwrap_or_default();
    let mut out = format!("{:>6} {:<10}", "shared", "strategy");
    for n in &names {
        let _ = write!(out, " {:>10}", format!("Δ_{n}"));
    }
    let _ = writeln!(out, " {:>10}", "Δ_MTL");
    for r in &s.rows {
        let _ = write!(out, "{:>6} {:<10}", r.shared_depth, r.strategy.name());
        for d in &r.per_task {
            let _ = write!(out, " {d:>10.2}");
        }
        let _ = writeln!(out, " {:>10.2}", r.delta_mtl);
    }
    out
}

/// Re-renders any JSON artefact written by the other commands as text.
pub fn report(path: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(io)?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(|e| Failure { code: 2, error: e })?;
    let parsed = |v: Value| -> Result<String, serde_json::Error> {
        let obj = v.as_object().cloned().unwrap_or_default();
        let rendered = if obj.contains_key("matrix") {
            serde_json::from_value::<MatrixFile>(v)?.matrix.to_heatmap()
        } else if obj.contains_key("correlation") {
            let f: CorrelationFile = serde_json::from_value(v)?;
            render_correlation(&f.reference, &f.candidate, &f.correlation)
        } else if obj.contains_key("samples") {
            render_bench(&serde_json::from_value(v)?)
        } else if obj.contains_key("rows") {
            render_sweep(&serde_json::from_value(v)?)
        } else if obj.contains_key("seeds") {
            let f: MeanReport = serde_json::from_value(v)?;
            format!(
                "mean over seeds {:?}\n{}\n",
                f.seeds,
                f.report.to_table(f.strategy.name())
            )
        } else {
            let f: SeedReport = serde_json::from_value(v)?;
            format!(
                "seed {} (checkpoint epoch {})\n{}\n",
                f.seed,
                f.checkpoint_epoch,
                f.report.to_table(f.strategy.name())
            )
        };
        Ok(rendered)
    };
    let rendered = parsed(value)
        .with_context(|| format!("{} is not a recognised artefact", path.display()))
        .map_err(|e| Failure { code: 2, error: e })?;
    print!("{rendered}");
    Ok(())
}

/// Strategy names from a comma-separated list.
pub fn parse_strategies(list: &str) -> anyhow::Result<Vec<StrategyKind>> {
    let mut out: Vec<StrategyKind> = list.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?;
    let mut seen = BTreeMap::new();
    out.retain(|k| seen.insert(*k, ()).is_none());
    Ok(out)
}
