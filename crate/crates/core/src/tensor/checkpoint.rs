//! `WLCP` parameter checkpoints.
//!
//! Layout: `b"WLCP"`, u32 version, u32 entry count, then per entry a u32 name
//! length, UTF-8 name bytes, u8 rank, rank × u64 dims and the little-endian
//! f32 payload. All integers are little-endian.

use std::fs;
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{bail, Result};

const MAGIC: &[u8; 4] = b"WLCP";
const VERSION: u32 = 1;

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        bail!(Format, "not a WLCP checkpoint");
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| crate::Error::Format("entry name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|n| n.checked_mul(4).is_some_and(|b| b <= buf.len())) else {
            bail!(Format, "entry {name} has an impossible shape {shape:?}");
        };
        let bytes = r.take(n * 4)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| crate::Error::Format(format!("entry {name}: {e}")))?;
        out.push((name.to_string(), t));
    }
    if r.pos != buf.len() {
        bail!(Format, "{} trailing bytes after last entry", buf.len() - r.pos);
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode(entries.iter().map(|(n, t)| (n.as_str(), t))))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&fs::read(path)?)
}

/// Write the entries of `store` whose names pass `filter`.
pub fn save_store<S: Real>(store: &ParamStore<S>, path: &Path, filter: impl Fn(&str) -> bool) -> Result<()> {
    let entries: Vec<(String, Tensor<f32>)> = store.iter().filter(|(_, n, _)| filter(n)).map(|(_, n, t)| (n.to_string(), t.cast())).collect();
    save(path, &entries)
}

/// Overwrite store entries from a checkpoint. Every checkpoint entry must
/// exist in the store with the same shape; returns the number loaded.
pub fn load_into<S: Real>(store: &mut ParamStore<S>, path: &Path) -> Result<usize> {
    let entries = load(path)?;
    for (name, t) in &entries {
        let Some(id) = store.id(name) else {
            bail!(Format, "checkpoint entry {name} has no matching parameter");
        };
        if store.get(id).shape() != t.shape() {
            bail!(Format, "checkpoint entry {name} has shape {:?}, model expects {:?}", t.shape(), store.get(id).shape());
        }
        store.set(id, t.cast())?;
    }
    Ok(entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.w".into(), Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., -6.5]).unwrap()),
            ("b".into(), Tensor::scalar(0.25)),
            ("c".into(), Tensor::new(&[1, 2, 2], vec![0., 1e-8, -1e8, 7.]).unwrap()),
        ]
    }

    #[test]
    fn roundtrip() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)));
        assert_eq!(&bytes[..4], b"WLCP");
        assert_eq!(decode(&bytes).unwrap(), s);
    }

    #[test]
    fn rejects_bad_magic_and_length() {
        let s = sample();
        let mut bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(crate::Error::Format(_))));
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(short), Err(crate::Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(crate::Error::Format(_))));
    }
}
