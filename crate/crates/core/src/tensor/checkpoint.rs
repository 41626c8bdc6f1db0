//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes   b"MSCKPT01"
//! hlen    u64       length of the JSON manifest in bytes
//! header  hlen      UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset", "numel"}]}
//! payload           raw f64 values; `offset` counts f64 elements from the payload start
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MSCKPT01";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// In-memory view of a checkpoint file: ordered named tensors plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).clone()))
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Adds optimizer moments as `adam.m/<name>` and `adam.v/<name>` entries.
    pub fn with_adam(mut self, store: &ParamStore, adam: &AdamState) -> Self {
        for id in store.ids() {
            let shape = store.get(id).shape().to_vec();
            let m = Tensor::new(shape.clone(), adam.m[id.index()].clone()).expect("moment shape");
            let v = Tensor::new(shape, adam.v[id.index()].clone()).expect("moment shape");
            self.tensors.push((format!("adam.m/{}", store.name(id)), m));
            self.tensors.push((format!("adam.v/{}", store.name(id)), v));
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every store parameter from the checkpoint; all must be present.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    /// Restores Adam moments when present; returns false if the checkpoint has none.
    pub fn restore_adam(&self, store: &ParamStore, adam: &mut AdamState) -> Result<bool> {
        for id in store.ids() {
            let name = store.name(id);
            let (Some(m), Some(v)) = (
                self.get(&format!("adam.m/{name}")),
                self.get(&format!("adam.v/{name}")),
            ) else {
                return Ok(false);
            };
            adam.m[id.index()] = m.data().to_vec();
            adam.v[id.index()] = v.data().to_vec();
        }
        Ok(true)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0;
    for (name, t) in &ckpt.tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            numel: t.len(),
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Manifest {
        meta: ckpt.meta.clone(),
        tensors: entries,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..header_end])?;
    let payload = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let start = e.offset * 8;
        let end = start + e.numel * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {} out of bounds", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        tensors,
    })
}
