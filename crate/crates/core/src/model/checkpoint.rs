//! Checkpoint files: JSON with every `f64` stored as the hex of its bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, MtlModel, TaskSpec};
use crate::diffcore::{ParamId, ParameterStore, Partition, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "saal-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredParam {
    pub id: ParamId,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub bits: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format: String,
    pub architecture: ArchitectureConfig,
    pub tasks: Vec<TaskSpec>,
    pub params: Vec<StoredParam>,
    /// Free-form provenance (resolved config, seed, epoch, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CheckpointFile {
    pub fn from_model(model: &MtlModel, meta: serde_json::Value) -> Self {
        let params = model
            .params
            .iter()
            .map(|(id, e)| StoredParam {
                id: id.clone(),
                partition: e.partition,
                shape: e.tensor.shape().to_vec(),
                bits: e
                    .tensor
                    .values()
                    .iter()
                    .map(|v| format!("{:016x}", v.to_bits()))
                    .collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            architecture: model.arch().clone(),
            tasks: model.tasks().to_vec(),
            params,
            meta,
        }
    }

    pub fn into_model(self) -> Result<MtlModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format `{}`",
                self.format
            )));
        }
        let mut store = ParameterStore::new();
        for p in self.params {
            let values = p
                .bits
                .iter()
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|_| Error::Config(format!("bad float bits `{h}` in {}", p.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            store.insert(p.id, Tensor::new(p.shape, values)?, p.partition)?;
        }
        MtlModel::from_parts(self.architecture, self.tasks, store)
    }
}

pub fn save_checkpoint(path: &Path, model: &MtlModel, meta: serde_json::Value) -> Result<()> {
    let file = CheckpointFile::from_model(model, meta);
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MtlModel, serde_json::Value)> {
    let file: CheckpointFile = serde_json::from_slice(&std::fs::read(path)?)?;
    let meta = file.meta.clone();
    Ok((file.into_model()?, meta))
}
