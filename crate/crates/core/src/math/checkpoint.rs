//! Checkpoint directories: `manifest.json` plus one raw little-endian `f64`
//! file per parameter, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub byte_order: String,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.manifest
            .params
            .iter()
            .position(|p| p.name == name)
            .map(|i| &self.tensors[i])
    }
}

pub fn save(dir: &Path, named: &[(String, &Tensor)], seed: u64, hyperparameters: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(named.len());
    for (name, t) in named {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        params.push(ParamEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
            file,
        });
    }
    let manifest = Manifest {
        dtype: "f64".into(),
        byte_order: "little-endian".into(),
        seed,
        hyperparameters,
        params,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.dtype != "f64" || manifest.byte_order != "little-endian" {
        return Err(Error::Load {
            file: path,
            line: 0,
            detail: format!(
                "unsupported dtype/byte order {}/{}",
                manifest.dtype, manifest.byte_order
            ),
        });
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let p = dir.join(&entry.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let [r, c] = entry.shape;
        if bytes.len() != r * c * 8 {
            return Err(Error::Load {
                file: p,
                line: 0,
                detail: format!("expected {} bytes for shape {r}x{c}, found {}", r * c * 8, bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(r, c, data)?);
    }
    Ok(Checkpoint { manifest, tensors })
}
