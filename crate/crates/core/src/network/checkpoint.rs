//! Binary tensor-record files.
//!
//! Layout (all integers little-endian `u32`):
//! `"AXAI" version count` followed by `count` records of
//! `name_len name rank dims[rank] payload`, the payload being
//! `product(dims)` little-endian `f32` values. Metadata travels as records
//! named `meta:key=value` with a single zero dimension and no payload.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AXAI";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_PREFIX: &str = "meta:";
const SPEC_PREFIX: &str = "spec.";

/// Metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub entries: BTreeMap<String, String>,
}

/// One decoded record: either a tensor or a metadata pair.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Tensor { name: String, tensor: Tensor<f32> },
    Meta { key: String, value: String },
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid("record", format!("{what} {v} does not fit in u32")))
}

/// Serializes tensors and metadata into the record format.
pub fn encode_records(tensors: &[(&str, &Tensor<f32>)], meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 4 + 64).sum();
    let mut buf = Vec::with_capacity(12 + payload);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, to_u32(tensors.len() + meta.len(), "record count")?);
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') {
            return Err(Error::invalid("metadata key", format!("{k:?} contains '=' or a newline")));
        }
        let name = format!("{META_PREFIX}{k}={v}");
        push_u32(&mut buf, to_u32(name.len(), "name length")?);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, 1);
        push_u32(&mut buf, 0);
    }
    for (name, t) in tensors {
        if name.starts_with(META_PREFIX) {
            return Err(Error::invalid("tensor name", format!("{name:?} uses the reserved metadata prefix")));
        }
        push_u32(&mut buf, to_u32(name.len(), "name length")?);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, to_u32(t.rank(), "rank")?);
        for &d in t.shape() {
            push_u32(&mut buf, to_u32(d, "dimension")?);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses the record format; `path` is only used in error messages.
pub fn decode_records(bytes: &[u8], path: &str) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad magic {magic:02x?}, expected \"AXAI\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version} (this build reads {CHECKPOINT_VERSION})")));
    }
    let count = r.u32("record count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| {
                let mut e = r.fail(format!("record {i}: name is not UTF-8"));
                if let Error::Format { offset, .. } = &mut e {
                    *offset = start;
                }
                e
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.fail(format!("record {name:?}: implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        if let Some(meta) = name.strip_prefix(META_PREFIX) {
            if dims != [0] {
                return Err(r.fail(format!("metadata record {name:?} must have dims [0]")));
            }
            let (k, v) = meta
                .split_once('=')
                .ok_or_else(|| r.fail(format!("metadata record {name:?} lacks '='")))?;
            out.push(Record::Meta {
                key: k.to_string(),
                value: v.to_string(),
            });
            continue;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| r.fail(format!("record {name:?}: invalid dims {dims:?}")))?;
        let bytes_needed = n
            .checked_mul(4)
            .ok_or_else(|| r.fail(format!("record {name:?}: payload too large")))?;
        let payload = r.take(bytes_needed, &format!("payload of {name:?}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Record::Tensor {
            name,
            tensor: Tensor::new(dims, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_records(path: &Path, tensors: &[(&str, &Tensor<f32>)], meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode_records(tensors, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes, &path.display().to_string())
}

/// Encodes a model with its spec and `meta`.
pub fn encode_checkpoint(model: &Model<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut entries = meta.entries.clone();
    for (k, v) in model.spec.to_pairs() {
        entries.insert(format!("{SPEC_PREFIX}{k}"), v);
    }
    let params = model.params();
    let tensors: Vec<(&str, &Tensor<f32>)> = params.iter().map(|p| (p.name.as_str(), p.tensor)).collect();
    encode_records(&tensors, &entries)
}

/// Rebuilds a model from checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<(Model<f32>, CheckpointMeta)> {
    let records = decode_records(bytes, path)?;
    let mut meta = CheckpointMeta::default();
    let mut spec_pairs = Vec::new();
    let mut tensors = BTreeMap::new();
    for rec in records {
        match rec {
            Record::Meta { key, value } => match key.strip_prefix(SPEC_PREFIX) {
                Some(k) => spec_pairs.push((k.to_string(), value)),
                None => {
                    meta.entries.insert(key, value);
                }
            },
            Record::Tensor { name, tensor } => {
                tensors.insert(name, tensor);
            }
        }
    }
    let spec = ModelSpec::from_pairs(spec_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut model = Model::<f32>::new(spec, 0)?;
    for p in model.params_mut() {
        let t = tensors
            .remove(&p.name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("{path}: missing tensor {:?}", p.name)))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "{path}: tensor {:?} has shape {:?}, architecture needs {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                ),
            ));
        }
        *p.tensor = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::invalid("checkpoint", format!("{path}: unexpected tensor {extra:?}")));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
