use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradientMap, ParameterStore};
use crate::error::{Error, Result};

/// `p ← p − lr·g` for every id present in `grads`; everything else is untouched.
pub fn sgd_step(params: &mut ParameterStore, grads: &GradientMap, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    for (id, g) in grads {
        let p = params
            .get_mut(id)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {id}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "{id}: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (w, d) in p.values_mut().iter_mut().zip(g.values()) {
            *w -= lr * d;
        }
        p.ensure_finite(id.as_str())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per key plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Starts a new optimiser step; call once before the [`AdamState::update`]s that belong to it.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Applies the bias-corrected Adam update to `values` in place.
    pub fn update(&mut self, key: &str, values: &mut [f64], grad: &[f64], cfg: &AdamConfig) -> Result<()> {
        if values.len() != grad.len() {
            return Err(Error::Dimension(format!(
                "{key}: {} values vs {} gradients",
                values.len(),
                grad.len()
            )));
        }
        if self.step == 0 {
            return Err(Error::Contract("AdamState::advance must precede update".into()));
        }
        let (m, v) = self
            .moments
            .entry(key.to_owned())
            .or_insert_with(|| (vec![0.0; values.len()], vec![0.0; values.len()]));
        if m.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{key}: optimiser state has {} entries, got {}",
                m.len(),
                values.len()
            )));
        }
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..values.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// One Adam step over the parameters named in `grads`.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &GradientMap,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Contract(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    state.advance();
    for (id, g) in grads {
        let p = params
            .get_mut(id)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {id}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "{id}: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        state.update(id.as_str(), p.values_mut(), g.values(), cfg)?;
        p.ensure_finite(id.as_str())?;
    }
    Ok(())
}

/// Cosine-annealed learning rate `lr0 · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Config("total_epochs must be positive".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} beyond schedule of {total_epochs}"
        )));
    }
    let frac = epoch as f64 / total_epochs as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
