use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use saal_core::datasets::{
    generate_planted_asymmetric, generate_symmetric_positive, load_csv, CsvSchema, MultiTaskDataset, SplitSpec,
    SyntheticSpec,
};
use saal_core::model::ArchitectureConfig;
use saal_core::strategies::{CoefficientSet, StrategyKind};
use saal_core::trainer::TrainerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    PlantedAsymmetric,
    SymmetricPositive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        generator: Generator,
        #[serde(default)]
        spec: SyntheticSpec,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
        #[serde(default)]
        split: SplitSpec,
    },
}

impl DatasetConfig {
    /// Builds the dataset for one seed; synthetic data and splits both follow the seed.
    pub fn load(&self, seed: u64) -> saal_core::Result<MultiTaskDataset> {
        match self {
            DatasetConfig::Synthetic {
                generator: Generator::PlantedAsymmetric,
                spec,
            } => generate_planted_asymmetric(spec, seed),
            DatasetConfig::Synthetic {
                generator: Generator::SymmetricPositive,
                spec,
            } => generate_symmetric_positive(spec, seed),
            DatasetConfig::Csv { path, schema, split } => load_csv(path, schema, split, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    pub strategy: StrategyKind,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Precomputed enumeration coefficients; computed per seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enumeration: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads `path`, applies `key=value` overrides, and validates.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        if let Some(seed) = seed {
            value["seeds"] = Value::from(vec![seed]);
        }
        if value.pointer("/trainer/strategy").is_some() {
            bail!("set the strategy at the top level, not inside `trainer`");
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(value).context("invalid experiment config")?;
        cfg.trainer.strategy = cfg.strategy;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.architecture.validate()?;
        self.trainer.validate()?;
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if let DatasetConfig::Synthetic { spec, .. } = &self.dataset {
            spec.validate()?;
            if spec.input_dim != self.architecture.input_dim {
                bail!(
                    "architecture.input_dim {} does not match dataset input_dim {}",
                    self.architecture.input_dim,
                    spec.input_dim
                );
            }
        }
        Ok(())
    }

    pub fn trainer_for(&self, seed: u64) -> TrainerConfig {
        self.trainer.with_seed(seed)
    }

    pub fn load_enumeration(&self) -> anyhow::Result<Option<CoefficientSet>> {
        match &self.enumeration {
            None => Ok(None),
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(Some(
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
                ))
            }
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, item: &str) -> anyhow::Result<()> {
    let (path, raw) = item
        .split_once('=')
        .with_context(|| format!("override `{item}` is not key=value"))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{item}` has an empty key");
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            bail!("override `{item}`: `{key}` is not inside an object");
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(map) => {
            map.insert(keys[keys.len() - 1].to_owned(), parsed);
            Ok(())
        }
        None => bail!("override `{item}`: parent is not an object"),
    }
}
