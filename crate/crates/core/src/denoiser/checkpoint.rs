//! Self-describing little-endian checkpoint format.
//!
//! ```text
//! magic            8 bytes   "APDNCKPT"
//! version          u32       1
//! in_channels      u32
//! base_channels    u32
//! num_blocks       u32
//! embed_dim        u32
//! steps_trained    u64
//! final_loss       f64
//! param_count      u32
//! param_count x {
//!     name_len     u32
//!     name         name_len bytes, UTF-8
//!     rank         u32
//!     dims         rank x u64
//!     data         prod(dims) x f64
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{DenoiserModel, DenoiserSpec, TrainingMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"APDNCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &DenoiserModel, mut w: W) -> Result<()> {
    let spec = model.spec();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        spec.in_channels,
        spec.base_channels,
        spec.num_blocks,
        spec.embed_dim,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&model.training_meta.steps.to_le_bytes())?;
    w.write_all(&model.training_meta.final_loss.to_le_bytes())?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.params() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<DenoiserModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        c.pos = 0;
        return Err(c.err("bad checkpoint magic"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(c.err(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = c.u32("spec field")? as usize;
    }
    let spec = DenoiserSpec {
        in_channels: dims[0],
        base_channels: dims[1],
        num_blocks: dims[2],
        embed_dim: dims[3],
    };
    let steps = c.u64("steps trained")?;
    let final_loss = c.f64("final loss")?;
    let count = c.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let start = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: start,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(c.err(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = match n {
            Some(n) if n.checked_mul(8).is_some_and(|b| b <= bytes.len()) => n,
            _ => return Err(c.err(format!("implausible shape {shape:?} for {name}"))),
        };
        let raw = c.take(8 * n, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes after last parameter"));
    }
    let meta = TrainingMeta {
        steps,
        final_loss,
        loss_curve: Vec::new(),
    };
    DenoiserModel::from_parts(spec, params, meta)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}
