//! Tabular ingestion: one CSV file with a header row plus a JSON schema
//! naming the feature columns and each task's label columns.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MultiTaskDataset, SplitSpec};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::TaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvTaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub name: String,
    pub cols: Vec<String>,
    pub kind: CsvTaskKind,
    /// Inferred as `max label + 1` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub tasks: Vec<CsvTask>,
}

impl CsvSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Loads `path` according to `schema`. Rows are numbered from 1, the header excluded.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, split: &SplitSpec, seed: u64) -> Result<MultiTaskDataset> {
    let mut reader = ::csv::ReaderBuilder::new()
        .flexible(true)
        .trim(::csv::Trim::All)
        .from_path(path)?;
    let header: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let width = header.len();
    let column = |name: &str| {
        header
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("column `{name}` not in CSV header")))
    };
    let feature_cols = schema.features.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    if feature_cols.is_empty() || schema.tasks.is_empty() {
        return Err(Error::Config(
            "schema needs at least one feature column and one task".into(),
        ));
    }
    let mut task_cols = Vec::with_capacity(schema.tasks.len());
    for task in &schema.tasks {
        if task.cols.is_empty() || (task.kind == CsvTaskKind::Classification && task.cols.len() != 1) {
            return Err(Error::Config(format!(
                "task `{}` has an invalid label column list",
                task.name
            )));
        }
        task_cols.push(task.cols.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?);
    }

    let mut features = Vec::new();
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); schema.tasks.len()];
    let mut n = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let value = |c: usize| -> Result<f64> {
            let raw = &record[c];
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("`{raw}` is not finite"),
                });
            }
            Ok(v)
        };
        for &c in &feature_cols {
            features.push(value(c)?);
        }
        for ((task, cols), out) in schema.tasks.iter().zip(&task_cols).zip(labels.iter_mut()) {
            for &c in cols {
                let v = value(c)?;
                if task.kind == CsvTaskKind::Classification && (v < 0.0 || v.fract() != 0.0) {
                    return Err(Error::Parse {
                        row,
                        message: format!("class label {v} is not a non-negative integer"),
                    });
                }
                out.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("CSV has no data rows".into()));
    }

    let mut specs = Vec::with_capacity(schema.tasks.len());
    let mut tensors = Vec::with_capacity(schema.tasks.len());
    for (id, (task, y)) in schema.tasks.iter().zip(labels).enumerate() {
        match task.kind {
            CsvTaskKind::Regression => {
                specs.push(TaskSpec::regression(id, &task.name, task.cols.len()));
                tensors.push(Tensor::matrix(n, task.cols.len(), y)?);
            }
            CsvTaskKind::Classification => {
                let observed = y.iter().fold(0.0f64, |m, &v| m.max(v)) as usize + 1;
                let classes = task.num_classes.unwrap_or(observed);
                if observed > classes {
                    return Err(Error::Config(format!(
                        "task `{}` has label {} but num_classes = {classes}",
                        task.name,
                        observed - 1
                    )));
                }
                specs.push(TaskSpec::classification(id, &task.name, classes));
                tensors.push(Tensor::vector(y)?);
            }
        }
    }
    let splits = split.split(n, seed)?;
    MultiTaskDataset::new(Tensor::matrix(n, feature_cols.len(), features)?, tensors, splits, specs)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::model::TaskKind;

    fn schema() -> CsvSchema {
        CsvSchema::from_json(
            r#"{"features": ["a", "b"],
                "tasks": [{"name": "r", "cols": ["y"], "kind": "regression"},
                          {"name": "c", "cols": ["k"], "kind": "classification"}]}"#,
        )
        .unwrap()
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    const SPLIT: SplitSpec = SplitSpec {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };

    #[test]
    fn loads_well_formed_file() {
        let mut text = String::from("a,b,y,k\n");
        for i in 0..10 {
            text.push_str(&format!("{i},{},{}.5,{}\n", i * 2, i, i % 3));
        }
        let f = write(&text);
        let ds = load_csv(f.path(), &schema(), &SPLIT, 0).unwrap();
        assert_eq!(ds.num_samples(), 10);
        assert_eq!(ds.features.row(3), &[3.0, 6.0]);
        assert_eq!(ds.labels[0].row(2), &[2.5]);
        assert_eq!(ds.tasks[1].kind, TaskKind::Classification { num_classes: 3 });
        assert_eq!(
            (ds.splits.train.len(), ds.splits.val.len(), ds.splits.test.len()),
            (6, 2, 2)
        );
    }

    #[test]
    fn malformed_row_is_named() {
        let f = write("a,b,y,k\n1,2,3,0\n1,2,3,1\n1,oops,3,0\n");
        match load_csv(f.path(), &schema(), &SPLIT, 0) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write("a,b,y,k\n1,2,3,0\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), &schema(), &SPLIT, 0),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn missing_column_is_config_error() {
        let f = write("a,y,k\n1,3,0\n");
        assert!(matches!(
            load_csv(f.path(), &schema(), &SPLIT, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_class_label_rejected() {
        let f = write("a,b,y,k\n1,2,3,0.5\n");
        assert!(matches!(
            load_csv(f.path(), &schema(), &SPLIT, 0),
            Err(Error::Parse { row: 1, .. })
        ));
    }
}
