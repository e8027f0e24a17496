//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `"HYPN"`, version `u32`, model kind `u32`, section
//! count `u32`, then a table of `(name_len u16, name, offset u64, len u64)`
//! entries, the section payloads, and a CRC32 of everything before it.
//! Tensor payloads are `ndim u32`, `dims u64 × ndim`, then raw `f32` values.
//! Byte payloads (JSON metadata) are stored verbatim.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HYPN";
pub const VERSION: u32 = 1;

const TAG_TENSOR: u8 = 0;
const TAG_BYTES: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    WrongKind { expected: ModelKind, found: u32 },
    #[error("missing section '{0}'")]
    MissingSection(String),
    #[error("malformed section '{name}': {reason}")]
    Malformed { name: String, reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ModelKind {
    Prior = 1,
    Field = 2,
    QueryNet = 3,
    Denoiser = 4,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Section {
    Tensor(Tensor<f32>),
    Bytes(Vec<u8>),
}

/// In-memory checkpoint: a model kind and named sections in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub sections: Vec<(String, Section)>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            sections: Vec::new(),
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.sections.push((name.into(), Section::Tensor(t.clone())));
    }

    pub fn put_json<T: serde::Serialize>(&mut self, name: impl Into<String>, value: &T) {
        let bytes = serde_json::to_vec(value).expect("config types serialize");
        self.sections.push((name.into(), Section::Bytes(bytes)));
    }

    fn get(&self, name: &str) -> Result<&Section, CheckpointError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| CheckpointError::MissingSection(name.into()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>, CheckpointError> {
        match self.get(name)? {
            Section::Tensor(t) => Ok(t.clone()),
            Section::Bytes(_) => Err(CheckpointError::Malformed {
                name: name.into(),
                reason: "expected a tensor".into(),
            }),
        }
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T, CheckpointError> {
        match self.get(name)? {
            Section::Bytes(b) => serde_json::from_slice(b).map_err(|e| CheckpointError::Malformed {
                name: name.into(),
                reason: e.to_string(),
            }),
            Section::Tensor(_) => Err(CheckpointError::Malformed {
                name: name.into(),
                reason: "expected bytes".into(),
            }),
        }
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::WrongKind {
                expected: kind,
                found: self.kind as u32,
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payloads: Vec<Vec<u8>> = self.sections.iter().map(|(_, s)| encode_section(s)).collect();
        let table_len: usize = self.sections.iter().map(|(n, _)| 2 + n.len() + 16).sum();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let mut offset = (16 + table_len) as u64;
        for ((name, _), payload) in self.sections.iter().zip(&payloads) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            offset += payload.len() as u64;
        }
        for p in &payloads {
            out.extend_from_slice(p);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Validates magic, version, structure and checksum, in that order.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let kind_raw = r.u32()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CheckpointError::Malformed {
                name: "<table>".into(),
                reason: "section name is not utf-8".into(),
            })?;
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            table.push((name, offset, len));
        }
        let body_end = bytes.len().checked_sub(4).ok_or(CheckpointError::Truncated)?;
        let payload_end = table.iter().map(|(_, o, l)| o.saturating_add(*l)).max().unwrap_or(r.pos);
        if r.pos > body_end || payload_end > body_end {
            return Err(CheckpointError::Truncated);
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let kind = match kind_raw {
            1 => ModelKind::Prior,
            2 => ModelKind::Field,
            3 => ModelKind::QueryNet,
            4 => ModelKind::Denoiser,
            other => {
                return Err(CheckpointError::Malformed {
                    name: "<header>".into(),
                    reason: format!("unknown model kind {other}"),
                })
            }
        };
        let sections = table
            .into_iter()
            .map(|(name, offset, len)| {
                let s = decode_section(&name, &bytes[offset..offset + len])?;
                Ok((name, s))
            })
            .collect::<Result<_, CheckpointError>>()?;
        Ok(Self { kind, sections })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Models that can be stored as a [`Checkpoint`].
pub trait Persist: Sized {
    fn to_checkpoint(&self) -> Checkpoint;
    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError>;
}

pub fn save_checkpoint<T: Persist>(model: &T, path: &Path) -> Result<(), CheckpointError> {
    model.to_checkpoint().save(path)
}

pub fn load_checkpoint<T: Persist>(path: &Path) -> Result<T, CheckpointError> {
    T::from_checkpoint(&Checkpoint::load(path)?)
}

fn encode_section(s: &Section) -> Vec<u8> {
    let mut out = Vec::new();
    match s {
        Section::Tensor(t) => {
            out.push(TAG_TENSOR);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.reserve(t.len() * 4);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Section::Bytes(b) => {
            out.push(TAG_BYTES);
            out.extend_from_slice(b);
        }
    }
    out
}

fn decode_section(name: &str, bytes: &[u8]) -> Result<Section, CheckpointError> {
    let bad = |reason: &str| CheckpointError::Malformed {
        name: name.into(),
        reason: reason.into(),
    };
    let (&tag, rest) = bytes.split_first().ok_or_else(|| bad("empty section"))?;
    match tag {
        TAG_TENSOR => {
            let mut r = Reader { bytes: rest, pos: 0 };
            let ndim = r.u32().map_err(|_| bad("short header"))? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("short header"))?;
            let data: Vec<f32> = rest[r.pos..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if (rest.len() - r.pos) % 4 != 0 {
                return Err(bad("payload is not a whole number of floats"));
            }
            Tensor::new(shape, data).map_err(|e| bad(&e.to_string())).map(Section::Tensor)
        }
        TAG_BYTES => Ok(Section::Bytes(rest.to_vec())),
        _ => Err(bad("unknown section tag")),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
