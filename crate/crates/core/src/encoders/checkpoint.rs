//! Parameter checkpoints: a JSON manifest next to one f32le blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use prism_diffcore::{Array, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, PrismError, Result};
use crate::io::{atomic_write, f32_to_le, le_to_f32, read_json, write_json};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "params.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    store: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    stage: String,
    seed: u64,
    hyperparameters: serde_json::Value,
    dtype: String,
    blob: String,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    pub stores: BTreeMap<String, ParamStore<f32>>,
}

impl Checkpoint {
    pub fn store(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.stores
            .get(name)
            .ok_or_else(|| PrismError::Invalid(format!("checkpoint has no `{name}` parameters")))
    }
}

/// Writes the blob, then the manifest, each atomically.
pub fn save_checkpoint<H: Serialize>(
    dir: &Path,
    stage: &str,
    seed: u64,
    hyperparameters: &H,
    stores: &[(&str, &ParamStore<f32>)],
) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (store, params) in stores {
        for (name, a) in params.iter() {
            tensors.push(Entry {
                store: store.to_string(),
                name: name.to_string(),
                shape: a.shape().to_vec(),
                offset: blob.len(),
            });
            blob.extend_from_slice(a.data());
        }
    }
    atomic_write(&dir.join(CHECKPOINT_BLOB), &f32_to_le(&blob))?;
    let m = Manifest {
        stage: stage.into(),
        seed,
        hyperparameters: serde_json::to_value(hyperparameters)?,
        dtype: "f32le".into(),
        blob: CHECKPOINT_BLOB.into(),
        tensors,
    };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m: Manifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    let path = dir.join(&m.blob);
    let blob = le_to_f32(&fs::read(&path).at(&path)?)?;
    let mut stores: BTreeMap<String, ParamStore<f32>> = BTreeMap::new();
    for e in m.tensors {
        let n: usize = e.shape.iter().product();
        let data = blob
            .get(e.offset..e.offset + n)
            .ok_or_else(|| PrismError::Invalid(format!("blob too short for `{}`", e.name)))?;
        let a = Array::new(e.shape, data.to_vec())?;
        stores.entry(e.store).or_default().add(e.name, a);
    }
    Ok(Checkpoint {
        stage: m.stage,
        seed: m.seed,
        hyperparameters: m.hyperparameters,
        stores,
    })
}
