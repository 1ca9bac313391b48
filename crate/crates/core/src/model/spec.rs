use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression { output_dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn classification(id: usize, name: impl Into<String>, num_classes: usize) -> Self {
        Self {
            id,
            name: name.into(),
            kind: TaskKind::Classification { num_classes },
        }
    }

    pub fn regression(id: usize, name: impl Into<String>, output_dim: usize) -> Self {
        Self {
            id,
            name: name.into(),
            kind: TaskKind::Regression { output_dim },
        }
    }

    pub fn loss(&self) -> LossKind {
        match self.kind {
            TaskKind::Classification { .. } => LossKind::SoftmaxCrossEntropy,
            TaskKind::Regression { .. } => LossKind::MeanSquaredError,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Classification { num_classes } => num_classes,
            TaskKind::Regression { output_dim } => output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Classification { num_classes } if num_classes < 2 => {
                Err(Error::Config(format!("task `{}` needs at least 2 classes", self.name)))
            }
            TaskKind::Regression { output_dim: 0 } => {
                Err(Error::Config(format!("task `{}` has zero output dimension", self.name)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub total_encoder_depth: usize,
    pub shared_depth: usize,
    pub decoder_depth: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// Half-shared default sized for the synthetic generators: three encoder
/// layers of width 16, the first one shared.
impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_width: 16,
            total_encoder_depth: 3,
            shared_depth: 1,
            decoder_depth: 1,
            activation: Activation::Tanh,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_depth > self.total_encoder_depth {
            return Err(Error::Config(format!(
                "shared_depth {} exceeds total_encoder_depth {}",
                self.shared_depth, self.total_encoder_depth
            )));
        }
        if self.input_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("input_dim and hidden_width must be positive".into()));
        }
        if self.decoder_depth == 0 {
            return Err(Error::Config("decoder_depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Same architecture with a different number of shared encoder layers.
    pub fn with_shared_depth(&self, shared_depth: usize) -> Self {
        Self {
            shared_depth,
            ..self.clone()
        }
    }

    /// Fully shared encoder.
    pub fn shared_bottom(&self) -> Self {
        self.with_shared_depth(self.total_encoder_depth)
    }
}
