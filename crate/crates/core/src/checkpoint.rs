//! Named-tensor archive.
//!
//! Layout: `DAJATCKP` magic, u32 format version, u64 manifest length, a JSON
//! manifest (metadata plus name/shape/offset of every tensor), then the
//! tensors as little-endian f32 in manifest order. Files are written to a
//! sibling temporary and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DAJATCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    payload_values: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Archive {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn take(&mut self, name: &str, path: &Path) -> Result<Tensor<f32>> {
        self.tensors.remove(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })
    }

    /// Stores every parameter and buffer as `{prefix}.{name}`.
    pub fn put_model(&mut self, prefix: &str, model: &Model<f32>) {
        for (t, info) in model.params().iter().zip(model.param_info()) {
            self.insert(format!("{prefix}.{}", info.name), t.clone());
        }
        for (t, info) in model.buffers().iter().zip(model.buffer_info()) {
            self.insert(format!("{prefix}.{}", info.name), t.clone());
        }
    }

    /// Fills a model of the right layout from `{prefix}.*` entries.
    pub fn take_model(&mut self, prefix: &str, model: &mut Model<f32>, path: &Path) -> Result<()> {
        let names: Vec<String> = model.param_info().iter().map(|i| i.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = self.take(&format!("{prefix}.{name}"), path)?;
            assign(&mut model.params_mut()[i], t, name, path)?;
        }
        let names: Vec<String> = model.buffer_info().iter().map(|i| i.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = self.take(&format!("{prefix}.{name}"), path)?;
            assign(&mut model.buffers_mut()[i], t, name, path)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors: entries,
            payload_values: offset,
        })?;
        let mut bytes = Vec::with_capacity(20 + manifest.len() + 4 * offset);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest runs past the end of the file".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..payload_start]).map_err(|e| bad(format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        if payload.len() != 4 * manifest.payload_values {
            return Err(bad(format!(
                "payload holds {} bytes, manifest declares {} values",
                payload.len(),
                manifest.payload_values
            )));
        }
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset + n > manifest.payload_values {
                return Err(bad(format!("tensor {} overruns the payload", e.name)));
            }
            let data = payload[4 * e.offset..4 * (e.offset + n)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        }
        Ok(Archive {
            meta: manifest.meta,
            tensors,
        })
    }
}

fn assign(dst: &mut Tensor<f32>, src: Tensor<f32>, name: &str, path: &Path) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("{name}: stored shape {:?}, model expects {:?}", src.shape(), dst.shape()),
        });
    }
    *dst = src;
    Ok(())
}
