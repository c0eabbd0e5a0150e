//! Parameter files: `manifest.json` lists `{name, shape}` in order and
//! `weights.bin` holds the values as little-endian f64, row-major, in
//! manifest order.

use std::fs;
use std::path::Path;

use scenecap_core::num::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::json::{read_json, write_json};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn of(store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect();
        Self { tensors }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

pub fn encode_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.numel() * 8);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(manifest: &Manifest, bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    if bytes.len() != manifest.numel() * 8 {
        return Err(format!("{} bytes of weights, manifest needs {}", bytes.len(), manifest.numel() * 8));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")));
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let n = t.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(format!("non-finite value in {}", t.name));
        }
        let tensor = Tensor::new(&t.shape, data).map_err(|e| format!("{}: {e}", t.name))?;
        store.add(t.name.clone(), tensor);
    }
    Ok(store)
}

/// Writes `manifest.json` and `weights.bin` into `dir`.
pub fn save_store(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(MANIFEST), &Manifest::of(store))?;
    let path = dir.join(WEIGHTS);
    fs::write(&path, encode_weights(store)).map_err(io_err(&path))
}

pub fn load_store(dir: &Path) -> Result<ParamStore> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let path = dir.join(WEIGHTS);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    decode_weights(&manifest, &bytes).map_err(|detail| Error::Format { path, detail })
}
