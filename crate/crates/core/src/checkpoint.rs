//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "RFSHCKPT" | version u32 | header_len u64 | header (TOML)
//! tensor_count u32 | per tensor: name, group, ndim u32, dims u64…, values f64…
//! checksum u64 (FNV-1a over every preceding byte)
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Values are always
//! stored as `f64`, so `f32` and `f64` models round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ByteReader;
use crate::diffnum::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFSHCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Mean loss terms over one epoch (or one evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub cls: f64,
    pub spr: f64,
    pub div: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub losses: LossRecord,
    pub val_accuracy: Option<f64>,
    /// λ1 and λ2 used for training, if any.
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupFlag {
    name: String,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: TrainingMeta,
    groups: Vec<GroupFlag>,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint<T> {
    pub model: Model<T>,
    pub meta: TrainingMeta,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl<T: Scalar> ModelCheckpoint<T> {
    pub fn new(model: Model<T>, meta: TrainingMeta) -> Self {
        ModelCheckpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            model: self.model.config.clone(),
            meta: self.meta.clone(),
            groups: store
                .groups()
                .iter()
                .map(|g| GroupFlag {
                    name: g.name.clone(),
                    trainable: g.trainable,
                })
                .collect(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Config(format!("cannot encode checkpoint header: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (_, p) in store.iter() {
            put_str(&mut buf, &p.name);
            put_str(&mut buf, &p.group);
            buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_f64_bytes());
            }
        }
        let sum = fnv1a(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let mut r = ByteReader::new(bytes, path);
        r.take(8)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 20 {
            return Err(r.corrupt("truncated header"));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::Corrupt(format!(
                "{}: checksum mismatch (file truncated or modified)",
                path.display()
            )));
        }
        let mut r = ByteReader::new(body, path);
        r.take(12)?;
        let hlen = usize::try_from(r.u64()?).map_err(|_| r.corrupt("header length overflows"))?;
        let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| r.corrupt("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad checkpoint header: {e}"),
        })?;
        let mut store = ParamStore::<T>::new();
        for g in &header.groups {
            store.add_group(&g.name, g.trainable);
        }
        let count = r.u32()? as usize;
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let group = read_str(&mut r)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.corrupt("shape overflows"))?;
            let data = (0..numel).map(|_| r.f64().map(T::lit)).collect::<Result<Vec<_>>>()?;
            store.add(&name, &group, Tensor::new(&shape, data)?)?;
        }
        if !r.is_done() {
            return Err(r.corrupt("trailing bytes before checksum"));
        }
        let mut model = Model::from_store(&header.model, store)?;
        model.config.freeze = crate::backbone::FreezePolicy::from_names(
            header.groups.iter().filter(|g| g.trainable).map(|g| g.name.as_str()),
        );
        Ok(ModelCheckpoint {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_str(r: &mut ByteReader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    let b = r.take(n)?;
    String::from_utf8(b.to_vec()).map_err(|_| r.corrupt("string is not UTF-8"))
}
