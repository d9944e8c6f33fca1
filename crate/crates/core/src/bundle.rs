//! On-disk tensor bundles.
//!
//! A bundle is a directory holding `manifest.json` and one packed payload
//! file, `data.bin`. Every entry is stored as little-endian `f32` in
//! row-major order at a byte offset into the payload, with a 64-bit FNV-1a
//! checksum of its bytes. Values are computed in `f64` and narrowed to
//! `f32` on write, so reading and re-writing a bundle reproduces it byte for
//! byte.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "data.bin";
pub const FORMAT_NAME: &str = "taptq-bundle";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    /// FNV-1a 64 of the entry's payload bytes, 16 lowercase hex digits.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub payload: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

/// FNV-1a 64-bit hash.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Named tensors plus free-form JSON metadata, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    pub entries: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, Value>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
        tensor.ensure_finite(&name)?;
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("bundle has no entry `{name}`")))
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("bundle metadata has no `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Manifest and payload bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let offset = payload.len() as u64;
            let start = payload.len();
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length: (payload.len() - start) as u64,
                checksum: format!("{:016x}", checksum(&payload[start..])),
            });
        }
        let manifest = Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            payload: PAYLOAD_FILE.into(),
            entries,
            metadata: self.metadata.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, payload))
    }

    pub fn decode(manifest: &[u8], payload: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.format != FORMAT_NAME || m.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported bundle format {} v{}",
                m.format, m.version
            )));
        }
        let mut bundle = TensorBundle {
            entries: Vec::with_capacity(m.entries.len()),
            metadata: m.metadata,
        };
        for e in &m.entries {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("entry `{}` has dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.length != 4 * count as u64 {
                return Err(Error::Format(format!(
                    "entry `{}`: {} bytes for shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len() as u64);
            let Some(end) = end else {
                return Err(Error::Format(format!("entry `{}` runs past the payload", e.name)));
            };
            let bytes = &payload[e.offset as usize..end as usize];
            let expected = u64::from_str_radix(&e.checksum, 16)
                .map_err(|_| Error::Format(format!("entry `{}` has a malformed checksum", e.name)))?;
            let actual = checksum(bytes);
            if expected != actual {
                return Err(Error::Checksum {
                    entry: e.name.clone(),
                    expected,
                    actual,
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Format(format!("entry `{}`: {err}", e.name)))?;
            bundle.push(e.name.clone(), t)?;
        }
        Ok(bundle)
    }

    /// Writes the bundle into `dir` (created if missing). Each file is
    /// replaced atomically; the manifest goes last.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, payload) = self.encode()?;
        write_atomic(dir.join(PAYLOAD_FILE), &payload)?;
        write_atomic(dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.display().to_string()));
        }
        let mpath = dir.join(MANIFEST_FILE);
        let manifest = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let ppath = dir.join(PAYLOAD_FILE);
        let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        Self::decode(&manifest, &payload)
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
