//! Task metrics and relative improvement over single-task baselines.
//!
//! For task `t` with metrics `i = 1..m_t`, MTL scores `M_i`, STL scores
//! `S_i` and `l_i = 1` for lower-is-better metrics:
//!
//! ```text
//! Δ_t   = 100 / m_t · Σ_i (−1)^{l_i} (M_i − S_i) / S_i
//! Δ_MTL = mean_t Δ_t
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{TaskKind, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub lower_is_better: bool,
}

impl MetricSpec {
    pub fn new(name: impl Into<String>, lower_is_better: bool) -> Self {
        Self {
            name: name.into(),
            lower_is_better,
        }
    }

    pub fn accuracy() -> Self {
        Self::new("accuracy", false)
    }

    pub fn mse() -> Self {
        Self::new("mse", true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    #[serde(flatten)]
    pub spec: MetricSpec,
    pub value: f64,
}

/// All metric values of one task.
pub type TaskMetrics = Vec<MetricValue>;

/// Accuracy (classification, higher is better) or MSE (regression, lower is better).
pub fn task_metrics(predictions: &Tensor, labels: &Tensor, task: &TaskSpec) -> Result<TaskMetrics> {
    let (rows, cols) = predictions.dims2()?;
    match task.kind {
        TaskKind::Classification { num_classes } => {
            if cols != num_classes || labels.len() != rows {
                return Err(Error::Dimension(format!(
                    "classification predictions {:?} vs labels {:?}",
                    predictions.shape(),
                    labels.shape()
                )));
            }
            let correct = (0..rows)
                .filter(|&r| {
                    let row = predictions.row(r);
                    let argmax = row
                        .iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                        )
                        .0;
                    argmax as f64 == labels.values()[r]
                })
                .count();
            Ok(vec![MetricValue {
                spec: MetricSpec::accuracy(),
                value: correct as f64 / rows as f64,
            }])
        }
        TaskKind::Regression { .. } => {
            if predictions.len() != labels.len() || labels.rows() != rows {
                return Err(Error::Dimension(format!(
                    "regression predictions {:?} vs labels {:?}",
                    predictions.shape(),
                    labels.shape()
                )));
            }
            let sse: f64 = predictions
                .values()
                .iter()
                .zip(labels.values())
                .map(|(p, y)| (p - y) * (p - y))
                .sum();
            Ok(vec![MetricValue {
                spec: MetricSpec::mse(),
                value: sse / predictions.len() as f64,
            }])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub task_names: Vec<String>,
    /// Δ_t in percent.
    pub per_task: Vec<f64>,
    /// Δ_MTL in percent.
    pub delta_mtl: f64,
    pub mtl_metrics: Vec<TaskMetrics>,
    pub stl_metrics: Vec<TaskMetrics>,
}

/// Signed relative change of one task, in percent.
pub fn task_delta(task: usize, mtl: &TaskMetrics, stl: &TaskMetrics) -> Result<f64> {
    if mtl.len() != stl.len() || mtl.is_empty() {
        return Err(Error::Contract(format!("task {task}: metric sets differ in size")));
    }
    let mut total = 0.0;
    for (m, s) in mtl.iter().zip(stl) {
        if m.spec != s.spec {
            return Err(Error::Contract(format!(
                "task {task}: metric `{}` does not match baseline `{}`",
                m.spec.name, s.spec.name
            )));
        }
        if s.value == 0.0 {
            return Err(Error::ZeroBaseline {
                task,
                metric: s.spec.name.clone(),
            });
        }
        let sign = if s.spec.lower_is_better { -1.0 } else { 1.0 };
        total += sign * (m.value - s.value) / s.value;
    }
    Ok(100.0 * total / mtl.len() as f64)
}

pub fn relative_improvement(
    mtl: &[TaskMetrics],
    stl: &[TaskMetrics],
    task_names: &[String],
) -> Result<ImprovementReport> {
    if mtl.len() != stl.len() || mtl.is_empty() {
        return Err(Error::Contract(format!(
            "{} MTL tasks vs {} STL tasks",
            mtl.len(),
            stl.len()
        )));
    }
    let per_task = mtl
        .iter()
        .zip(stl)
        .enumerate()
        .map(|(t, (m, s))| task_delta(t, m, s))
        .collect::<Result<Vec<_>>>()?;
    let delta_mtl = per_task.iter().sum::<f64>() / per_task.len() as f64;
    let task_names = if task_names.len() == mtl.len() {
        task_names.to_vec()
    } else {
        (0..mtl.len()).map(|t| format!("task{t}")).collect()
    };
    Ok(ImprovementReport {
        task_names,
        per_task,
        delta_mtl,
        mtl_metrics: mtl.to_vec(),
        stl_metrics: stl.to_vec(),
    })
}

/// Rounds a percentage to the two decimals used in reports.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl ImprovementReport {
    /// Mean of several reports over the same tasks (e.g. across seeds).
    pub fn mean(reports: &[ImprovementReport]) -> Result<ImprovementReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Contract("no reports to average".into()))?;
        let n = reports.len() as f64;
        let mut out = first.clone();
        for t in 0..first.per_task.len() {
            out.per_task[t] = reports.iter().map(|r| r.per_task[t]).sum::<f64>() / n;
            for (i, mv) in out.mtl_metrics[t].iter_mut().enumerate() {
                mv.value = reports.iter().map(|r| r.mtl_metrics[t][i].value).sum::<f64>() / n;
            }
            for (i, mv) in out.stl_metrics[t].iter_mut().enumerate() {
                mv.value = reports.iter().map(|r| r.stl_metrics[t][i].value).sum::<f64>() / n;
            }
        }
        out.delta_mtl = reports.iter().map(|r| r.delta_mtl).sum::<f64>() / n;
        Ok(out)
    }

    /// Aligned text table: one row per model, relative improvements then raw metrics.
    pub fn to_table(&self, label: &str) -> String {
        let mut header = format!("{:<16}", "");
        for name in &self.task_names {
            let _ = write!(header, " {:>10}", format!("Δ_{name}"));
        }
        let _ = write!(header, " {:>10}", "Δ_MTL");
        for (name, metrics) in self.task_names.iter().zip(&self.mtl_metrics) {
            for m in metrics {
                let arrow = if m.spec.lower_is_better { "↓" } else { "↑" };
                let _ = write!(header, " {:>14}", format!("{name}.{}{arrow}", m.spec.name));
            }
        }
        let mut stl_row = format!("{:<16}", "STL");
        for _ in &self.task_names {
            let _ = write!(stl_row, " {:>10.2}", 0.0);
        }
        let _ = write!(stl_row, " {:>10.2}", 0.0);
        for metrics in &self.stl_metrics {
            for m in metrics {
                let _ = write!(stl_row, " {:>14.4}", m.value);
            }
        }
        let mut row = format!("{label:<16}");
        for d in &self.per_task {
            let _ = write!(row, " {:>10.2}", round2(*d));
        }
        let _ = write!(row, " {:>10.2}", round2(self.delta_mtl));
        for metrics in &self.mtl_metrics {
            for m in metrics {
                let _ = write!(row, " {:>14.4}", m.value);
            }
        }
        format!("{header}\n{stl_row}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(name: &str, lower: bool, value: f64) -> MetricValue {
        MetricValue {
            spec: MetricSpec::new(name, lower),
            value,
        }
    }

    #[test]
    fn identical_metrics_give_zero() {
        let m = vec![mv("acc", false, 0.8), mv("mse", true, 2.0)];
        assert_eq!(task_delta(0, &m, &m).unwrap(), 0.0);
    }

    #[test]
    fn lower_is_better_improvement_is_positive() {
        let d = task_delta(0, &vec![mv("mse", true, 0.5)], &vec![mv("mse", true, 1.0)]).unwrap();
        assert!((d - 50.0).abs() < 1e-12);
        let d = task_delta(0, &vec![mv("acc", false, 0.5)], &vec![mv("acc", false, 1.0)]).unwrap();
        assert!((d + 50.0).abs() < 1e-12);
    }

    #[test]
    fn zero_baseline_and_mismatch_are_errors() {
        let s = vec![mv("mse", true, 0.0)];
        assert!(matches!(
            task_delta(0, &vec![mv("mse", true, 1.0)], &s),
            Err(Error::ZeroBaseline { .. })
        ));
        assert!(task_delta(0, &vec![mv("acc", false, 1.0)], &vec![mv("mse", true, 1.0)]).is_err());
        assert!(relative_improvement(&[vec![mv("a", false, 1.0)]], &[], &[]).is_err());
    }

    #[test]
    fn scale_invariance() {
        let d1 = task_delta(0, &vec![mv("m", true, 3.0)], &vec![mv("m", true, 4.0)]).unwrap();
        let d2 = task_delta(0, &vec![mv("m", true, 300.0)], &vec![mv("m", true, 400.0)]).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn accuracy_and_mse() {
        let spec = TaskSpec::classification(0, "c", 2);
        let preds = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let labels = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(task_metrics(&preds, &labels, &spec).unwrap()[0].value, 0.75);
        let labels_ok = Tensor::vector(vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(task_metrics(&preds, &labels_ok, &spec).unwrap()[0].value, 1.0);

        let reg = TaskSpec::regression(0, "r", 2);
        let y = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(task_metrics(&y, &y, &reg).unwrap()[0].value, 0.0);
        let wrong = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(task_metrics(&wrong, &y, &reg).is_err());
    }

    #[test]
    fn mean_of_reports() {
        let names = vec!["a".to_string()];
        let r1 = relative_improvement(&[vec![mv("m", false, 2.0)]], &[vec![mv("m", false, 1.0)]], &names).unwrap();
        let r2 = relative_improvement(&[vec![mv("m", false, 1.0)]], &[vec![mv("m", false, 1.0)]], &names).unwrap();
        let m = ImprovementReport::mean(&[r1, r2]).unwrap();
        assert!((m.per_task[0] - 50.0).abs() < 1e-12);
        assert!((m.delta_mtl - 50.0).abs() < 1e-12);
        assert!(m.to_table("Equal").contains("50.00"));
    }
}
