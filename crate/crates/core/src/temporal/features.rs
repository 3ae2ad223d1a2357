//! `WLFT` feature files: `b"WLFT"`, u32 version, u64 L, u64 D, then `L × D`
//! little-endian f32 values row-major. One file per video, `<video_id>.wlft`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"WLFT";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `[L, D]`, one row per clip in temporal order.
    pub features: Tensor<f32>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn file_name(&self) -> String {
        format!("{}.wlft", self.video_id)
    }
}

pub fn encode(features: &Tensor<f32>) -> Result<Vec<u8>> {
    let (l, d) = features.dims2();
    let mut buf = Vec::with_capacity(HEADER + 4 * l * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(l as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(buf: &[u8]) -> Result<Tensor<f32>> {
    if buf.len() < HEADER || &buf[..4] != MAGIC {
        bail!(Format, "not a WLFT feature file");
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        bail!(Format, "unsupported WLFT version {version}");
    }
    let l = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    let need = l.checked_mul(d).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(HEADER));
    if need != Some(buf.len()) {
        bail!(Format, "WLFT payload length does not match {l}x{d}");
    }
    if l == 0 || d == 0 {
        bail!(Format, "WLFT file has an empty dimension");
    }
    let data = buf[HEADER..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&[l, d], data)
}

pub fn save(dir: &Path, seq: &FeatureSequence) -> Result<PathBuf> {
    let path = dir.join(seq.file_name());
    fs::write(&path, encode(&seq.features)?)?;
    Ok(path)
}

/// Read a feature file; the video id is the file stem.
pub fn load(path: &Path) -> Result<FeatureSequence> {
    let features = decode(&fs::read(path)?)?;
    let video_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    Ok(FeatureSequence { video_id, features })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let t = Tensor::from_fn(&[3, 2], |k| k as f32 * 0.5);
        let buf = encode(&t).unwrap();
        assert_eq!(buf.len(), HEADER + 24);
        assert_eq!(decode(&buf).unwrap(), t);
        assert!(decode(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
