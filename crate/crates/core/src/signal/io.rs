//! Manifest + payload persistence.
//!
//! The manifest is a TOML document carrying a format tag and version. The
//! payload starts with a 16-byte header (`PAYLOAD_MAGIC`, version `u32`,
//! frame length `u32`, all little-endian) followed by the frame data:
//! little-endian `f32`, frame-major, I row then Q row, frames in cell order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{CellCount, Dataset, DomainInfo};
use super::frame::IqFrame;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "rfshapelet-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const PAYLOAD_MAGIC: [u8; 8] = *b"RFSIQF32";
pub const PAYLOAD_VERSION: u32 = 1;
pub const PAYLOAD_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEncoding {
    pub element: String,
    pub byte_order: String,
    pub interleaving: String,
}

impl Default for SampleEncoding {
    fn default() -> Self {
        SampleEncoding {
            element: "f32".into(),
            byte_order: "little".into(),
            interleaving: "frame-major, I row then Q row".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub frame_length: usize,
    pub class_count: usize,
    pub total_frames: usize,
    /// Payload location; relative paths resolve against the manifest's directory.
    pub payload: PathBuf,
    pub encoding: SampleEncoding,
    pub domains: Vec<DomainInfo>,
    pub cells: Vec<CellCount>,
}

impl DatasetManifest {
    pub fn for_dataset(dataset: &Dataset, payload: PathBuf) -> Self {
        DatasetManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            frame_length: dataset.frame_length(),
            class_count: dataset.class_count(),
            total_frames: dataset.len(),
            payload,
            encoding: SampleEncoding::default(),
            domains: dataset.domains().to_vec(),
            cells: dataset.cell_counts(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        m.validate(path)?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if self.format != MANIFEST_FORMAT {
            return Err(bad(format!("unexpected format tag `{}`", self.format)));
        }
        if self.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        if self.encoding != SampleEncoding::default() {
            return Err(bad(format!("unsupported sample encoding {:?}", self.encoding)));
        }
        let mut sum = 0usize;
        for c in &self.cells {
            if c.class >= self.class_count {
                return Err(bad(format!(
                    "cell references class {} but class_count is {}",
                    c.class, self.class_count
                )));
            }
            if c.domain >= self.domains.len() {
                return Err(bad(format!("cell references unknown domain {}", c.domain)));
            }
            sum += c.count;
        }
        if sum != self.total_frames {
            return Err(Error::Mismatch(format!(
                "cell counts sum to {sum}, manifest declares {} frames",
                self.total_frames
            )));
        }
        let ordered = self
            .cells
            .windows(2)
            .all(|w| (w[0].class, w[0].domain) < (w[1].class, w[1].domain));
        if !ordered {
            return Err(bad("cells must be listed once each in class-major order".into()));
        }
        Ok(())
    }
}

fn payload_reference(manifest_path: &Path, payload_path: &Path) -> PathBuf {
    let mdir = manifest_path.parent().unwrap_or(Path::new(""));
    match payload_path.strip_prefix(mdir) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => std::path::absolute(payload_path).unwrap_or_else(|_| payload_path.to_path_buf()),
    }
}

/// Writes the manifest and its contiguous binary payload.
pub fn save_dataset(dataset: &Dataset, manifest_path: &Path, payload_path: &Path) -> Result<DatasetManifest> {
    if dataset.frame_length() > u32::MAX as usize {
        return Err(Error::InvalidArgument("frame length exceeds u32".into()));
    }
    let mut bytes = Vec::with_capacity(PAYLOAD_HEADER_LEN + dataset.len() * dataset.frame_length() * 8);
    bytes.extend_from_slice(&PAYLOAD_MAGIC);
    bytes.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(dataset.frame_length() as u32).to_le_bytes());
    for f in dataset.frames() {
        for v in f.as_rows() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(payload_path).map_err(|e| Error::io(payload_path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(payload_path, e))?;

    let payload_ref = payload_reference(manifest_path, payload_path);
    let manifest = DatasetManifest::for_dataset(dataset, payload_ref);
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: manifest_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = DatasetManifest::parse(&text, manifest_path)?;
    let payload_path = if manifest.payload.is_absolute() {
        manifest.payload.clone()
    } else {
        manifest_path
            .parent()
            .unwrap_or(Path::new(""))
            .join(&manifest.payload)
    };
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() < PAYLOAD_HEADER_LEN || bytes[..8] != PAYLOAD_MAGIC {
        return Err(Error::Corrupt(format!(
            "{} is not an I/Q payload (bad magic)",
            payload_path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != PAYLOAD_VERSION {
        return Err(Error::Version {
            found: version,
            expected: PAYLOAD_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let t = manifest.frame_length;
    if header_len != t {
        return Err(Error::Mismatch(format!(
            "payload header frame length {header_len} != manifest frame length {t}"
        )));
    }
    let data = &bytes[PAYLOAD_HEADER_LEN..];
    let expected = manifest.total_frames * 2 * t * 4;
    if data.len() != expected {
        return Err(Error::Mismatch(format!(
            "payload holds {} bytes of frame data, manifest implies {expected} ({} frames × 2 × {t} × 4)",
            data.len(),
            manifest.total_frames
        )));
    }

    let frame_bytes = 2 * t * 4;
    let mut frames = Vec::with_capacity(manifest.total_frames);
    let mut chunks = data.chunks_exact(frame_bytes);
    for cell in &manifest.cells {
        for _ in 0..cell.count {
            let chunk = chunks.next().expect("length checked above");
            let rows: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            frames.push(IqFrame::from_rows(rows, cell.class, cell.domain)?);
        }
    }
    Dataset::new(t, manifest.class_count, manifest.domains, frames)
}
