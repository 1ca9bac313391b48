use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Identifier of a trainable tensor, e.g. `shared/enc0/w`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Which part of the multi-task network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Shared,
    Task(usize),
    SelfAux {
        source: usize,
        target: usize,
    },
    /// Parameters outside the multi-task partition (e.g. transfer heads).
    Auxiliary,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Shared => f.write_str("shared"),
            Partition::Task(t) => write!(f, "task:{t}"),
            Partition::SelfAux { source, target } => write!(f, "self_aux:{source}->{target}"),
            Partition::Auxiliary => f.write_str("auxiliary"),
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid partition label `{s}`"));
        if s == "shared" {
            return Ok(Partition::Shared);
        }
        if s == "auxiliary" {
            return Ok(Partition::Auxiliary);
        }
        if let Some(t) = s.strip_prefix("task:") {
            return t.parse().map(Partition::Task).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("self_aux:") {
            let (a, b) = rest.split_once("->").ok_or_else(bad)?;
            return Ok(Partition::SelfAux {
                source: a.parse().map_err(|_| bad())?,
                target: b.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

impl Serialize for Partition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Partition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub partition: Partition,
}

/// Named parameter tensors, each labelled with exactly one partition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<ParamId, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, tensor: Tensor, partition: Partition) -> Result<()> {
        if self.entries.contains_key(&id) {
            return Err(Error::Contract(format!("duplicate parameter id {id}")));
        }
        self.entries.insert(id, ParamEntry { tensor, partition });
        Ok(())
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.entries.get(id).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, id: &ParamId) -> Option<&mut Tensor> {
        self.entries.get_mut(id).map(|e| &mut e.tensor)
    }

    pub fn partition(&self, id: &ParamId) -> Option<Partition> {
        self.entries.get(id).map(|e| e.partition)
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn remove(&mut self, id: &ParamId) -> Option<ParamEntry> {
        self.entries.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Ids whose partition satisfies `pred`.
    pub fn ids_where(&self, pred: impl Fn(Partition) -> bool) -> Vec<ParamId> {
        self.entries
            .iter()
            .filter(|(_, e)| pred(e.partition))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Keeps only parameters whose partition satisfies `keep`.
    pub fn retain(&mut self, keep: impl Fn(Partition) -> bool) {
        self.entries.retain(|_, e| keep(e.partition));
    }
}

/// Gradient per parameter id; shapes mirror the parameters.
pub type GradientMap = BTreeMap<ParamId, Tensor>;

/// Restricts a gradient map to the ids whose partition satisfies `keep`.
pub fn filter_gradients(grads: &GradientMap, params: &ParameterStore, keep: impl Fn(Partition) -> bool) -> GradientMap {
    grads
        .iter()
        .filter(|(id, _)| params.partition(id).is_some_and(&keep))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}
