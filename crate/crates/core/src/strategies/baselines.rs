use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::coeffs::CoefficientSet;
use crate::diffcore::{GradientMap, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::model::RouteId;

/// `Σ_t exp(−s_t)·L_t/2 + s_t/2` for per-task log-variances `s`.
pub fn uncertainty_weights(losses: &[f64], log_vars: &[f64]) -> Result<f64> {
    if losses.len() != log_vars.len() {
        return Err(Error::Dimension(format!(
            "{} losses vs {} log-variances",
            losses.len(),
            log_vars.len()
        )));
    }
    Ok(losses
        .iter()
        .zip(log_vars)
        .map(|(l, s)| (-s).exp() * l / 2.0 + s / 2.0)
        .sum())
}

/// Loss weights `exp(−s_t)/2` seen by the model parameters.
pub fn uncertainty_loss_weights(log_vars: &[f64]) -> Vec<f64> {
    log_vars.iter().map(|s| (-s).exp() / 2.0).collect()
}

/// `∂/∂s_t` of the uncertainty-weighted loss: `−exp(−s_t)·L_t/2 + 1/2`.
pub fn uncertainty_log_var_gradient(losses: &[f64], log_vars: &[f64]) -> Vec<f64> {
    losses
        .iter()
        .zip(log_vars)
        .map(|(l, s)| -(-s).exp() * l / 2.0 + 0.5)
        .collect()
}

/// Dynamic weight averaging from per-epoch mean task losses (oldest first).
///
/// `w_t = T·softmax(r/τ)_t` with `r_t = L_t(e−1)/L_t(e−2)`; unit weights
/// until two epochs of history exist.
pub fn dwa_weights(history: &[Vec<f64>], num_tasks: usize, temperature: f64) -> Result<CoefficientSet> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "DWA temperature must be positive, got {temperature}"
        )));
    }
    if history.len() < 2 {
        return Ok(super::equal_weights(num_tasks));
    }
    let (prev, last) = (&history[history.len() - 2], &history[history.len() - 1]);
    if prev.len() != num_tasks || last.len() != num_tasks {
        return Err(Error::Dimension(format!(
            "DWA history rows must have {num_tasks} losses"
        )));
    }
    let ratios: Vec<f64> = last
        .iter()
        .zip(prev)
        .map(|(l, p)| if *p == 0.0 { 1.0 } else { l / p })
        .collect();
    let top = ratios.iter().fold(f64::NEG_INFINITY, |m, r| m.max(*r));
    let exps: Vec<f64> = ratios.iter().map(|r| ((r - top) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut set = CoefficientSet::default();
    for (t, e) in exps.iter().enumerate() {
        set.set(RouteId::Primary(t), num_tasks as f64 * e / z)?;
    }
    Ok(set)
}

/// Projects each task gradient away from the conflicting gradients of the
/// other tasks, visiting them in a random order. Returns the projected
/// per-task gradients.
pub fn pcgrad_project<R: Rng + ?Sized>(grads: &[Vec<f64>], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let n = grads.first().map_or(0, Vec::len);
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::Dimension("PCGrad gradients must have equal length".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut out = Vec::with_capacity(grads.len());
    for (i, gi) in grads.iter().enumerate() {
        let mut g = gi.clone();
        let mut others: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        others.shuffle(rng);
        for j in others {
            let gj = &grads[j];
            let norm = dot(gj, gj);
            let d = dot(&g, gj);
            if norm > 0.0 && d < 0.0 {
                let c = d / norm;
                for (x, y) in g.iter_mut().zip(gj) {
                    *x -= c * y;
                }
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Sum of the PCGrad-projected per-task gradients. Parameters missing from
/// a task's map count as zero for that task.
pub fn pcgrad<R: Rng + ?Sized>(per_task: &[GradientMap], rng: &mut R) -> Result<GradientMap> {
    let ids: BTreeSet<&ParamId> = per_task.iter().flat_map(|g| g.keys()).collect();
    let mut shapes = Vec::with_capacity(ids.len());
    for id in &ids {
        let t = per_task.iter().find_map(|g| g.get(*id)).expect("id from some map");
        shapes.push(t.shape().to_vec());
    }
    let flat: Vec<Vec<f64>> = per_task
        .iter()
        .map(|g| {
            ids.iter()
                .zip(&shapes)
                .flat_map(|(id, shape)| match g.get(*id) {
                    Some(t) => t.values().to_vec(),
                    None => vec![0.0; shape.iter().product()],
                })
                .collect()
        })
        .collect();
    let projected = pcgrad_project(&flat, rng)?;
    let total_len = flat.first().map_or(0, Vec::len);
    let mut merged = vec![0.0; total_len];
    for g in &projected {
        for (m, v) in merged.iter_mut().zip(g) {
            *m += v;
        }
    }
    let mut out = GradientMap::new();
    let mut offset = 0;
    for (id, shape) in ids.into_iter().zip(shapes) {
        let len: usize = shape.iter().product();
        out.insert(id.clone(), Tensor::new(shape, merged[offset..offset + len].to_vec())?);
        offset += len;
    }
    Ok(out)
}
