use serde::{Deserialize, Serialize};

use super::RelationshipMatrix;
use crate::error::{Error, Result};

/// Per-target rank agreement between two relationship matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub task_names: Vec<String>,
    /// `None` where fewer than two sources are scored or a ranking is constant.
    pub per_target: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; `None` for constant input or
/// fewer than two points.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn oriented(m: &RelationshipMatrix, s: usize, t: usize) -> Option<f64> {
    m.score(s, t).map(|v| if m.lower_is_better { -v } else { v })
}

/// For each target, Spearman ρ between the two matrices' rankings of the
/// other tasks as sources. Scores are oriented so that larger means more
/// helpful before ranking.
pub fn spearman(a: &RelationshipMatrix, b: &RelationshipMatrix) -> Result<CorrelationReport> {
    if a.task_names != b.task_names {
        return Err(Error::Config("spearman needs matrices over the same tasks".into()));
    }
    a.validate()?;
    b.validate()?;
    let n = a.num_tasks();
    let mut per_target = Vec::with_capacity(n);
    for t in 0..n {
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..n)
            .filter(|&s| s != t)
            .filter_map(|s| Some((oriented(a, s, t)?, oriented(b, s, t)?)))
            .unzip();
        per_target.push(spearman_rho(&xs, &ys));
    }
    let defined: Vec<f64> = per_target.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CorrelationReport {
        task_names: a.task_names.clone(),
        per_target,
        mean,
    })
}
