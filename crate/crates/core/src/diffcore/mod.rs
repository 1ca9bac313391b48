//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! first-order optimisers, and a central-difference gradient oracle.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{
    backward, backward_from, evaluate, forward, numerical_gradient, Evaluation, Graph, Inputs, NodeId, Op,
};
pub use optim::{adam_step, cosine_lr, sgd_step, AdamConfig, AdamState};
pub use params::{filter_gradients, GradientMap, ParamEntry, ParamId, ParameterStore, Partition};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
