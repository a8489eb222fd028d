//! Named-tensor container ("DFNW"): magic, version, count, then per tensor
//! the name length and UTF-8 name, rank, extents and an `f32` payload, all
//! little-endian.

use std::fs;
use std::path::Path;

use super::params::Tensor;
use crate::error::{DfnError, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DFNW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for e in &t.shape {
            out.extend_from_slice(&(*e as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| DfnError::Format(format!("weights container truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(DfnError::Format("not a weights container (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(DfnError::Format(format!("unsupported weights version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DfnError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| DfnError::Format("tensor too large".into()))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(DfnError::Format(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DfnError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| DfnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DfnError::io(path, e))
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode_tensors(tensors))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| DfnError::io(path, e))?;
    decode_tensors(&bytes).map_err(|e| match e {
        DfnError::Format(m) => DfnError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
