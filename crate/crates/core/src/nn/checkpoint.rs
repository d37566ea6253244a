//! Named-parameter archive.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic      8 bytes  "PSYNCKPT"
//! version    u32      currently 1
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 (free-form, usually JSON)
//! count      u32
//! count × entry:
//!   name_len u32, name (UTF-8)
//!   kind     u8       0 = trainable, 1 = buffer
//!   ndim     u32, dims ndim × u32
//!   values   product(dims) × f32 LE
//! ```
//!
//! Values are always stored as `f32` regardless of the in-memory precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamKind, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSYNCKPT";
pub const VERSION: u32 = 1;

/// Serializes every parameter and buffer of `store` whose name starts with
/// one of `prefixes` (all of them when `prefixes` is empty).
pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, prefixes: &[&str], meta: &str) -> Vec<u8> {
    let selected: Vec<_> = store
        .iter()
        .filter(|(_, p)| prefixes.is_empty() || prefixes.iter().any(|x| p.name.starts_with(x)))
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(selected.len() as u32).to_le_bytes());
    for (_, p) in selected {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        let [r, c] = p.tensor.shape();
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Parses an archive into an `f32` store plus its metadata string.
pub fn from_bytes(buf: &[u8]) -> Result<(ParamStore<f32>, String)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let kind = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::Checkpoint(format!("`{name}` has {ndim} dims"))),
        };
        let bytes = r.take(rows * cols * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(rows, cols, data)?;
        match kind {
            0 => store.add(&name, t)?,
            1 => store.add_buffer(&name, t)?,
            k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
        };
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((store, meta))
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, prefixes: &[&str], meta: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(store, prefixes, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, String)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// Loads every tensor of `archive` that matches `prefix` into `store`,
/// failing when the store lacks one of them.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, archive: &ParamStore<f32>, prefix: &str) -> Result<usize> {
    let wanted = archive.iter().filter(|(_, p)| p.name.starts_with(prefix)).count();
    if wanted == 0 {
        return Err(Error::Checkpoint(format!("archive has no entries for `{prefix}`")));
    }
    let copied = store.copy_from(&archive.cast(), prefix)?;
    if copied != wanted {
        return Err(Error::Checkpoint(format!(
            "`{prefix}`: archive has {wanted} tensors, model accepted {copied}"
        )));
    }
    Ok(copied)
}
