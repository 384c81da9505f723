//! Named parameter collections and their checkpoint format.
//!
//! A checkpoint is a JSON object mapping each parameter name to
//! `{"shape": [...], "data": [...]}`. Names are kept in a `BTreeMap`, so the
//! file is written in sorted order and two checkpoints of the same model diff
//! cleanly. `serde_json` prints `f64` with shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Keeps only parameters whose name satisfies `keep`, returning the rest.
    pub fn split_off(&mut self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let (kept, removed): (BTreeMap<_, _>, BTreeMap<_, _>) =
            std::mem::take(&mut self.tensors).into_iter().partition(|(k, _)| keep(k));
        self.tensors = kept;
        ParamStore { tensors: removed }
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for t in self.tensors.values_mut() {
            t.set_requires_grad(flag);
        }
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, Entry> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.as_str(),
                    Entry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("parameter map serialises")
    }

    /// Parses a checkpoint. Loaded tensors are frozen; callers decide what trains.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, Entry> =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        let mut store = ParamStore::new();
        for (name, entry) in map {
            let tensor = Tensor::new(entry.shape, entry.data)?;
            if !tensor.all_finite() {
                return Err(Error::Data(format!("checkpoint parameter `{name}` is not finite")));
            }
            store.insert(name, tensor);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
