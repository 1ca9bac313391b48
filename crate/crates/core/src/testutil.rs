//! Small fixtures shared by unit tests.

use crate::datasets::{generate_planted_asymmetric, MultiTaskDataset, SyntheticSpec};
use crate::model::{build_model, ArchitectureConfig, MtlModel};

pub(crate) fn tiny_dataset(num_samples: usize, extra_tasks: usize, seed: u64) -> MultiTaskDataset {
    let spec = SyntheticSpec {
        num_samples,
        input_dim: 4,
        latent_dim: 3,
        helper_outputs: 2,
        recipient_subspace: 2,
        extra_tasks,
        ..Default::default()
    };
    generate_planted_asymmetric(&spec, seed).unwrap()
}

pub(crate) fn tiny_arch(shared_depth: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        input_dim: 4,
        hidden_width: 5,
        total_encoder_depth: 2,
        shared_depth,
        decoder_depth: 1,
        activation: Default::default(),
    }
}

pub(crate) fn tiny_problem(seed: u64) -> (MtlModel, MultiTaskDataset) {
    let ds = tiny_dataset(60, 0, seed);
    let model = build_model(&tiny_arch(1), &ds.tasks, seed).unwrap();
    (model, ds)
}
