//! Synthetic multi-task regression data with planted task relationships.
//!
//! A latent `z ~ N(0, I_k)` is observed through a random linear map
//! `x = W z + ν`. Tasks read smooth nonlinear features `tanh(a·z)` of the
//! latent.
//!
//! *Planted asymmetry*: the `helper` task predicts clean features of the
//! full latent; the `recipient` predicts a combination of the helper
//! features restricted to a latent subspace, plus a distractor feature
//! (the corruption term) and label noise of std `σ`. Helper gradients teach
//! the shared encoder what the recipient needs, while the recipient's noisy
//! gradients perturb the features the helper relies on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{MultiTaskDataset, SplitSpec};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::TaskSpec;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    pub num_samples: usize,
    pub input_dim: usize,
    /// Std of the observation noise added to `x`.
    pub input_noise: f64,
    /// Number of clean helper outputs (tanh features of the full latent).
    pub helper_outputs: usize,
    /// Scale applied to the helper features.
    pub helper_signal: f64,
    /// Latent coordinates the recipient depends on (`z[..recipient_subspace]`).
    pub recipient_subspace: usize,
    /// Label-noise std `σ` of the recipient.
    pub recipient_noise: f64,
    /// Weight of the distractor feature in the recipient's target.
    pub corruption: f64,
    /// Additional clean single-output tasks on random latent directions.
    pub extra_tasks: usize,
    pub split: SplitSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            num_samples: 2000,
            input_dim: 16,
            input_noise: 0.05,
            helper_outputs: 10,
            helper_signal: 1.0,
            recipient_subspace: 6,
            recipient_noise: 1.0,
            corruption: 0.3,
            extra_tasks: 0,
            split: SplitSpec::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.input_dim == 0 || self.num_samples < 3 || self.helper_outputs == 0 {
            return Err(Error::Config(
                "synthetic dimensions and sample count must be positive".into(),
            ));
        }
        if self.recipient_subspace == 0 || self.recipient_subspace > self.latent_dim {
            return Err(Error::Config(format!(
                "recipient_subspace {} must be in 1..={}",
                self.recipient_subspace, self.latent_dim
            )));
        }
        if !(self.recipient_noise >= 0.0) || !(self.input_noise >= 0.0) || !(self.corruption >= 0.0) {
            return Err(Error::Config("noise levels and corruption must be non-negative".into()));
        }
        self.split.sizes(self.num_samples).map(|_| ())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Random direction supported on the first `support` latent coordinates,
/// scaled to unit norm times `gain`.
fn direction(rng: &mut ChaCha8Rng, dim: usize, support: usize, gain: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for x in v.iter_mut().take(support) {
        *x = normal(rng);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| gain * x / norm).collect()
}

fn feature(dir: &[f64], z: &[f64]) -> f64 {
    dir.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().tanh()
}

struct Latent {
    z: Vec<Vec<f64>>,
    features: Tensor,
}

fn draw_latent(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Latent> {
    let (k, d) = (spec.latent_dim, spec.input_dim);
    let scale = 1.0 / (k as f64).sqrt();
    let mix: Vec<f64> = normal_vec(rng, d * k).into_iter().map(|v| v * scale).collect();
    let mut z = Vec::with_capacity(spec.num_samples);
    let mut x = Vec::with_capacity(spec.num_samples * d);
    for _ in 0..spec.num_samples {
        let zi = normal_vec(rng, k);
        for r in 0..d {
            let clean: f64 = (0..k).map(|c| mix[r * k + c] * zi[c]).sum();
            x.push(clean + spec.input_noise * normal(rng));
        }
        z.push(zi);
    }
    Ok(Latent {
        z,
        features: Tensor::matrix(spec.num_samples, d, x)?,
    })
}

fn extra_task_labels(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    z: &[Vec<f64>],
    first_id: usize,
) -> Result<(Vec<TaskSpec>, Vec<Tensor>)> {
    let mut tasks = Vec::new();
    let mut labels = Vec::new();
    for e in 0..spec.extra_tasks {
        let dir = direction(rng, spec.latent_dim, spec.latent_dim, 1.5);
        let y = z.iter().map(|zi| feature(&dir, zi)).collect();
        tasks.push(TaskSpec::regression(first_id + e, format!("extra{e}"), 1));
        labels.push(Tensor::matrix(z.len(), 1, y)?);
    }
    Ok((tasks, labels))
}

/// Two-task dataset where task 0 (`helper`) helps task 1 (`recipient`)
/// under sharing while task 1 degrades task 0.
pub fn generate_planted_asymmetric(spec: &SyntheticSpec, seed: u64) -> Result<MultiTaskDataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "data");
    let k = spec.latent_dim;
    let latent = draw_latent(spec, &mut rng)?;
    let n = spec.num_samples;

    // The first half of the helper features live on the recipient's subspace.
    let shared_feats = spec.helper_outputs.div_ceil(2);
    let helper_dirs: Vec<Vec<f64>> = (0..spec.helper_outputs)
        .map(|j| {
            let support = if j < shared_feats { spec.recipient_subspace } else { k };
            direction(&mut rng, k, support, 1.5)
        })
        .collect();
    let readout: Vec<f64> = (0..shared_feats)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let distractor = direction(&mut rng, k, k, 1.5);

    let mut helper = Vec::with_capacity(n * spec.helper_outputs);
    let mut recipient_clean = Vec::with_capacity(n);
    let mut recipient = Vec::with_capacity(n);
    for zi in &latent.z {
        let feats: Vec<f64> = helper_dirs.iter().map(|a| feature(a, zi)).collect();
        helper.extend(feats.iter().map(|f| spec.helper_signal * f));
        let signal: f64 =
            readout.iter().zip(&feats).map(|(c, f)| c * f).sum::<f64>() + spec.corruption * feature(&distractor, zi);
        recipient_clean.push(signal);
        recipient.push(signal + spec.recipient_noise * normal(&mut rng));
    }

    let mut tasks = vec![
        TaskSpec::regression(0, "helper", spec.helper_outputs),
        TaskSpec::regression(1, "recipient", 1),
    ];
    let helper_t = Tensor::matrix(n, spec.helper_outputs, helper)?;
    let mut labels = vec![helper_t.clone(), Tensor::matrix(n, 1, recipient)?];
    let mut clean = vec![helper_t, Tensor::matrix(n, 1, recipient_clean)?];
    let (extra_specs, extra_labels) = extra_task_labels(spec, &mut rng, &latent.z, 2)?;
    tasks.extend(extra_specs);
    clean.extend(extra_labels.iter().cloned());
    labels.extend(extra_labels);

    let splits = spec.split.split(n, seed)?;
    let mut ds = MultiTaskDataset::new(latent.features, labels, splits, tasks)?;
    ds.clean_labels = Some(clean);
    Ok(ds)
}

/// Two clean tasks reading overlapping latent subspaces; sharing should
/// help both.
pub fn generate_symmetric_positive(spec: &SyntheticSpec, seed: u64) -> Result<MultiTaskDataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "data");
    let k = spec.latent_dim;
    let latent = draw_latent(spec, &mut rng)?;
    let n = spec.num_samples;

    // Both tasks read the same feature bank through different readouts.
    let bank: Vec<Vec<f64>> = (0..spec.helper_outputs)
        .map(|_| direction(&mut rng, k, spec.recipient_subspace, 1.5))
        .collect();
    let readouts: Vec<Vec<f64>> = (0..2).map(|_| normal_vec(&mut rng, spec.helper_outputs)).collect();
    let mut ys = vec![Vec::with_capacity(n), Vec::with_capacity(n)];
    for zi in &latent.z {
        let feats: Vec<f64> = bank.iter().map(|a| feature(a, zi)).collect();
        for (y, r) in ys.iter_mut().zip(&readouts) {
            y.push(spec.helper_signal * r.iter().zip(&feats).map(|(c, f)| c * f).sum::<f64>());
        }
    }
    let mut tasks = vec![TaskSpec::regression(0, "left", 1), TaskSpec::regression(1, "right", 1)];
    let mut labels = ys
        .into_iter()
        .map(|y| Tensor::matrix(n, 1, y))
        .collect::<Result<Vec<_>>>()?;
    let (extra_specs, extra_labels) = extra_task_labels(spec, &mut rng, &latent.z, 2)?;
    tasks.extend(extra_specs);
    labels.extend(extra_labels);
    let splits = spec.split.split(n, seed)?;
    let mut ds = MultiTaskDataset::new(latent.features, labels.clone(), splits, tasks)?;
    ds.clean_labels = Some(labels);
    Ok(ds)
}
