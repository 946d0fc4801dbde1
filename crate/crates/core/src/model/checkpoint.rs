//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVIG" | version u32 | config length u32 | config JSON
//! entry count u32
//! per entry: name length u16 | name | role u8 | dtype u8 | rank u8 | dims u64 × rank
//! raw tensor data in entry order
//! ```
//!
//! `role` is a [`ParamKind`] tag, or [`BUFFER_ROLE`] for non-learnable state.
//! f64 data round-trips bit-exactly; f32 is accepted on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Buffers, ParamKind, ParamStore};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AVIG";
pub const CHECKPOINT_VERSION: u32 = 1;
const BUFFER_ROLE: u8 = 0xff;

struct Entry<'a> {
    name: &'a str,
    role: u8,
    tensor: &'a Tensor,
}

pub fn write_checkpoint(model: &Model, dtype: DType, out: &mut impl Write) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let entries: Vec<Entry> = model
        .params()
        .iter()
        .map(|(name, p)| Entry {
            name,
            role: p.kind.tag(),
            tensor: &p.value,
        })
        .chain(model.buffers().iter().map(|(name, t)| Entry {
            name,
            role: BUFFER_ROLE,
            tensor: t,
        }))
        .collect();

    let config = serde_json::to_vec(model.config()).expect("model config serializes");
    let mut head = Vec::new();
    head.extend_from_slice(&CHECKPOINT_MAGIC);
    head.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    head.extend_from_slice(&(config.len() as u32).to_le_bytes());
    head.extend_from_slice(&config);
    head.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        head.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        head.extend_from_slice(e.name.as_bytes());
        head.push(e.role);
        head.push(dtype.tag());
        head.push(e.tensor.rank() as u8);
        for &d in e.tensor.shape() {
            head.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    out.write_all(&head).map_err(io)?;
    for e in &entries {
        let mut bytes = Vec::with_capacity(e.tensor.numel() * dtype.size());
        for &v in e.tensor.data() {
            match dtype {
                DType::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        out.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, DType::F64, &mut w).map_err(|e| relabel(e, path))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format("checkpoint", "truncated file"),
            _ => Error::io("<checkpoint>", e),
        })?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

pub fn read_checkpoint(input: impl Read) -> Result<Model> {
    let bad = |reason: String| Error::format("checkpoint", reason);
    let mut r = Cursor { inner: input };
    if r.array::<4>()? != CHECKPOINT_MAGIC {
        return Err(bad("missing AVIG magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_bytes = r.bytes(config_len)?;
    let config: ModelConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| bad(format!("config block: {e}")))?;
    config.validate()?;

    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| bad("entry name is not UTF-8".into()))?;
        let role = r.u8()?;
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| bad(format!("`{name}` has an unknown dtype")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, role, dtype, shape));
    }

    let mut params = ParamStore::new();
    let mut buffers = Buffers::new();
    for (name, role, dtype, shape) in manifest {
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| bad(format!("`{name}` has an implausible shape {shape:?}")))?;
        let raw = r.bytes(numel * dtype.size())?;
        let data: Vec<f64> = match dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let tensor = Tensor::new(&shape, data)?;
        if role == BUFFER_ROLE {
            buffers.insert(name, tensor);
        } else {
            let kind = ParamKind::from_tag(role).ok_or_else(|| bad(format!("`{name}` has an unknown role {role}")))?;
            params.insert(name, tensor, kind)?;
        }
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    Model::from_parts(config, params, buffers)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| relabel(e, path))
}
