use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TaskMetrics;
use crate::strategies::CoefficientSet;

/// Deterministic summary of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean training loss per route, keyed `t` or `s->t`.
    pub train_losses: BTreeMap<String, f64>,
    pub val_losses: Vec<f64>,
    pub val_metrics: Vec<TaskMetrics>,
    pub val_delta_mtl: Option<f64>,
    /// Validation Δ_MTL when baselines are known, otherwise negated validation loss.
    pub selection_score: f64,
    pub coefficients: CoefficientSet,
}

/// Wall-clock measurements of one epoch; kept apart from the records so
/// that replayed runs compare equal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub mean_batch_seconds: f64,
    pub batch_seconds: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub timing: Vec<EpochTiming>,
}

#[derive(Serialize, Deserialize)]
struct EpochLine {
    kind: String,
    #[serde(flatten)]
    record: EpochRecord,
    timing: EpochTiming,
}

/// One JSON object per line: a `header` line carrying `meta`, then one
/// `epoch` line per record.
pub fn write_history_jsonl(path: impl AsRef<Path>, meta: &serde_json::Value, history: &TrainingHistory) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = serde_json::Map::new();
    header.insert("kind".into(), "header".into());
    if let serde_json::Value::Object(m) = meta {
        header.extend(m.clone());
    } else {
        header.insert("meta".into(), meta.clone());
    }
    writeln!(out, "{}", serde_json::Value::Object(header))?;
    for (record, timing) in history.epochs.iter().zip(&history.timing) {
        let line = EpochLine {
            kind: "epoch".into(),
            record: record.clone(),
            timing: timing.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history_jsonl(path: impl AsRef<Path>) -> Result<(serde_json::Value, TrainingHistory)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: serde_json::Value = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => {
            return Err(Error::Parse {
                row: 1,
                message: "empty history file".into(),
            })
        }
    };
    if header.get("kind").and_then(|k| k.as_str()) != Some("header") {
        return Err(Error::Parse {
            row: 1,
            message: "first line must be the header".into(),
        });
    }
    let mut history = TrainingHistory::default();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EpochLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row: i + 2,
            message: e.to_string(),
        })?;
        history.epochs.push(parsed.record);
        history.timing.push(parsed.timing);
    }
    Ok((header, history))
}
