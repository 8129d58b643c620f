//! Model checkpoints: a JSON manifest (config plus parameter names and
//! shapes) next to a flat little-endian `f64` file in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    /// File name of the parameter data, relative to the manifest.
    pub data: String,
}

fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>` with a `.bin` extension.
pub fn save(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bin = data_path(path);
    let params = state.params();
    let manifest = Manifest {
        config: state.config().clone(),
        params: params
            .names()
            .iter()
            .zip(params.values())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
        data: bin.file_name().unwrap().to_string_lossy().into_owned(),
    };
    let mut bytes = Vec::with_capacity(params.numel() * 8);
    for t in params.values() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, json + "\n")?;
    fs::write(bin, bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let bin = path.with_file_name(&manifest.data);
    let bytes = fs::read(&bin)?;
    let expected: usize = manifest.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Parse(format!(
            "{}: {} bytes, manifest describes {expected} values",
            bin.display(),
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let data: Vec<f64> = values.by_ref().take(p.shape[0] * p.shape[1]).collect();
        tensors.push(Tensor::new(p.shape[0], p.shape[1], data)?);
    }
    let names: Vec<String> = manifest.params.iter().map(|p| p.name.clone()).collect();
    ModelState::from_parts(&manifest.config, &names, tensors)
}
