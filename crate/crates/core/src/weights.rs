//! `LFWB` weights files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "LFWB" count { name_len name ndim dims[ndim] f32[prod(dims)] }*count
//! ```

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LFWB";

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
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
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Weights(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Weights("bad magic, expected LFWB".into()));
    }
    let count = r.u32("entry count")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Weights("parameter name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Weights(format!("duplicate parameter `{name}`")));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Weights(format!("`{name}` shape overflows")))?;
        let raw = r.take(numel.saturating_mul(4), "data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Weights(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Weights(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save(model: &EncoderModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model.params()))
}

/// Replaces every parameter of `model` from the file. Names and shapes must
/// match exactly.
pub fn load_into(model: &mut EncoderModel, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(&bytes)?;
    let expected: HashSet<String> = model.params().map(|(n, _)| n.to_string()).collect();
    let got: HashSet<String> = entries.iter().map(|(n, _)| n.clone()).collect();
    if let Some(missing) = expected.difference(&got).min() {
        return Err(Error::Weights(format!("missing parameter `{missing}`")));
    }
    for (name, t) in entries {
        model.set_param(&name, t)?;
    }
    Ok(())
}
