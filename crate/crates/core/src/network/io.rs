//! Binary model files.
//!
//! Layout, all integers little-endian:
//! `"ONTM"`, `u32` version, `u32` config length + UTF-8 config text,
//! `u32` tensor count, then per tensor `u32` name length + name, `u32` rank,
//! `u32` extents, and `f32` values.

use std::fs;
use std::path::Path;

use super::{DenoiserModel, ModelConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ONTM";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &DenoiserModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = model.config().to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("file truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<DenoiserModel> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = c.u32("config length")? as usize;
    let text = std::str::from_utf8(c.take(len, "config")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_text(text)?;
    let layout = config.layout();
    let count = c.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let nlen = c.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "tensor name")?)
            .map_err(|_| Error::Format(format!("tensor {i} has a non-UTF-8 name")))?
            .to_string();
        let rank = c.u32(&name)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor '{name}' has implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| c.u32(&name).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if let Some(spec) = layout.get(i).filter(|s| s.name == name) {
            if spec.shape != shape {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {shape:?}, config requires {:?}",
                    spec.shape
                )));
            }
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .filter(|&n| n <= (buf.len() - c.pos) / 4)
            .ok_or_else(|| Error::Format(format!("tensor '{name}' extents {shape:?} exceed the file")))?;
        let raw = c.take(4 * n, &name)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        if let Some(j) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("tensor '{name}' value {j} is not finite")));
        }
        named.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    DenoiserModel::from_parts(config, named)
}

pub fn save_model(model: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
