//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "MRV1" | version u32 | provenance (u32 length + UTF-8 key=value lines)
//! tensor count u32 | per tensor: name (u32 length + UTF-8), dtype u8 (0 = f32,
//! 1 = f64), rank u8, dims u32 * rank, raw values | CRC32 of all preceding bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{MicroResNet, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, ScalarMode, Tensor};

pub const MAGIC: &[u8; 4] = b"MRV1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("tensor {name} stored as {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        found: ScalarMode,
        expected: ScalarMode,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Ordered key/value record of how a checkpoint was produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    entries: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.insert(key.into(), value.to_string());
        self
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: &Provenance) {
        for (k, v) in other.entries() {
            self.set(k, v);
        }
    }

    /// Entries whose key starts with `prefix`, prefix stripped.
    pub fn section(&self, prefix: &str) -> Provenance {
        let mut out = Provenance::new();
        for (k, v) in self.entries() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.set(rest, v);
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, CheckpointError> {
        let mut p = Provenance::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("provenance line '{line}'")))?;
            p.set(k, v);
        }
        Ok(p)
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub provenance: Provenance,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn dtype_code(mode: ScalarMode) -> u8 {
    match mode {
        ScalarMode::Single => 0,
        ScalarMode::Double => 1,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &ckpt.provenance.to_text());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        put_str(&mut out, name);
        out.push(dtype_code(T::MODE));
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.values() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &'static str) -> std::result::Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

/// Parses and verifies a checkpoint. Nothing is returned unless the whole
/// file parses and its CRC matches.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> std::result::Result<Checkpoint<T>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let provenance_text = r.string("provenance")?;
    let count = r.u32("tensor count")? as usize;
    let mut raw = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let dtype = r.u8("dtype")?;
        let mode = match dtype {
            0 => ScalarMode::Single,
            1 => ScalarMode::Double,
            other => return Err(CheckpointError::Malformed(format!("dtype code {other} for {name}"))),
        };
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let width = match mode {
            ScalarMode::Single => 4,
            ScalarMode::Double => 8,
        };
        let data = r.take(numel.saturating_mul(width), "tensor values")?;
        raw.push((name, mode, dims, data));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let provenance = Provenance::parse(&provenance_text)?;
    let mut tensors = Vec::with_capacity(raw.len());
    for (name, mode, dims, data) in raw {
        if mode != T::MODE {
            return Err(CheckpointError::DtypeMismatch {
                name,
                found: mode,
                expected: T::MODE,
            });
        }
        let values = data.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::new(dims, values).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok(Checkpoint { provenance, tensors })
}

impl<T: Scalar> MicroResNet<T> {
    /// Snapshot of all state. Structural fields are written under `model.*`.
    pub fn to_checkpoint(&self, provenance: &Provenance) -> Checkpoint<T> {
        let mut p = provenance.clone();
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        p.set("model.widths", widths.join(","))
            .set("model.num_classes", self.num_classes)
            .set("model.frozen_prefix", self.frozen_prefix)
            .set("model.bn_eps", self.bn.eps)
            .set("model.bn_momentum", self.bn.momentum)
            // Unfrozen layers normalize with batch statistics while training.
            .set("model.unfrozen_bn", "train")
            .set("model.precision", T::MODE);
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, Tensor::new(t.dims().to_vec(), t.values().to_vec()).expect("valid")))
            .collect();
        Checkpoint { provenance: p, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let p = &ckpt.provenance;
        let field = |k: &str| {
            p.get(k)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing provenance field {k}")))
        };
        let bad = |k: &str| CheckpointError::Malformed(format!("unparsable provenance field {k}"));
        let widths: Vec<usize> = field("model.widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| bad("model.widths")))
            .collect::<std::result::Result<_, _>>()?;
        if widths.len() != NUM_BLOCKS {
            return Err(bad("model.widths").into());
        }
        let classes: usize = field("model.num_classes")?.parse().map_err(|_| bad("model.num_classes"))?;
        let frozen: usize = field("model.frozen_prefix")?.parse().map_err(|_| bad("model.frozen_prefix"))?;
        let mut model = Self::build(&widths, classes, 0)?;
        model.bn.eps = field("model.bn_eps")?.parse().map_err(|_| bad("model.bn_eps"))?;
        model.bn.momentum = field("model.bn_momentum")?.parse().map_err(|_| bad("model.bn_momentum"))?;
        model.freeze_prefix(frozen)?;
        {
            let slots = model.named_tensors_mut();
            if slots.len() != ckpt.tensors.len() {
                return Err(CheckpointError::Malformed(format!(
                    "expected {} tensors, found {}",
                    slots.len(),
                    ckpt.tensors.len()
                ))
                .into());
            }
            for ((name, slot), (stored_name, stored)) in slots.into_iter().zip(&ckpt.tensors) {
                if &name != stored_name || slot.dims() != stored.dims() {
                    return Err(CheckpointError::Malformed(format!(
                        "tensor {stored_name} {:?} does not fit slot {name} {:?}",
                        stored.dims(),
                        slot.dims()
                    ))
                    .into());
                }
                slot.values_mut().copy_from_slice(stored.values());
            }
        }
        Ok(model)
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint<T: Scalar>(model: &MicroResNet<T>, provenance: &Provenance, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(&model.to_checkpoint(provenance));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a model and the provenance it was saved with (including `model.*` keys).
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(MicroResNet<T>, Provenance)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode_checkpoint::<T>(&bytes)?;
    let model = MicroResNet::from_checkpoint(&ckpt)?;
    Ok((model, ckpt.provenance))
}
