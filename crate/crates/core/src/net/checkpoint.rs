//! Checkpoints are directories: `manifest.json` plus one `SCT1` file per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkConfig, SegModel};
use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::tensor::{read_tensor_any, write_tensor, DType, Real};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config: NetworkConfig,
    pub params: Vec<CheckpointEntry>,
    /// Free-form training state (epoch, best score, ...) kept alongside the weights.
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Writes every parameter of `model` under `dir` (created if missing).
pub fn save_checkpoint<T: Real>(model: &SegModel<T>, dir: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    let mut err = None;
    model.visit_params(&mut |p| {
        if err.is_some() {
            return;
        }
        let file = format!("{}.sct", p.name);
        if let Err(e) = write_tensor(dir.join(&file), &p.value) {
            err = Some(e);
        }
        params.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: dtype_name(T::DTYPE).into(),
            file,
        });
    });
    if let Some(e) = err {
        return Err(e);
    }
    let manifest = CheckpointManifest {
        format: 1,
        config: model.config().clone(),
        params,
        extra,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Rebuilds the model from the stored config and loads every parameter (cast to `T`).
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<(SegModel<T>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut model = SegModel::new(manifest.config.clone())?;
    let mut tensors = BTreeMap::new();
    for e in &manifest.params {
        let t = read_tensor_any(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!("{}: shape {:?} disagrees with manifest {:?}", e.file, t.shape(), e.shape)));
        }
        tensors.insert(e.name.clone(), t.into_real::<T>());
    }
    let mut err = None;
    model.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match tensors.remove(&p.name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t,
            Some(t) => err = Some(Error::Data(format!("{}: shape {:?}, model expects {:?}", p.name, t.shape(), p.value.shape()))),
            None => err = Some(Error::Data(format!("checkpoint is missing parameter {}", p.name))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Data(format!("checkpoint has unknown parameter {name}")));
    }
    Ok((model, manifest))
}
