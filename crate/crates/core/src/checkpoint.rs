//! SPLV1 checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPLV1"                 5 magic bytes
//! u32 version             currently 1
//! repeated until EOF:
//!   u32 name_len, name    UTF-8
//!   u32 rank, u32 dims[rank]
//!   f32 data[prod(dims)]
//! ```
//!
//! Records are written in sorted name order so identical weights always
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"SPLV1";
pub const VERSION: u32 = 1;

pub fn to_bytes<'a>(stores: impl IntoIterator<Item = &'a ParamStore>) -> Vec<u8> {
    let mut all: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for s in stores {
        all.extend(s.iter());
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in all {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut out = BTreeMap::new();
    while r.pos < buf.len() {
        let start = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Truncated { offset: start })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, stores: impl IntoIterator<Item = &'a ParamStore>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    std::fs::write(path, to_bytes(stores)).map_err(|e| Error::file(path, e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let buf = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&buf)
}

/// Every entry whose name starts with `prefix`.
pub fn select(map: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    map.iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}
