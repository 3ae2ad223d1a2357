//! Raw clip frames and the `WLFG` frame-grid file format
//! (`b"WLFG"`, u32 T, H, W, C, then the f32 payload; all little-endian).

use std::fs;
use std::path::Path;

use crate::error::{bail, Result};

/// `[T, H, W, C]` unit-interval intensities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGrid {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl FrameGrid {
    pub fn new(t: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            bail!(Shape, "frame dims must be positive, got {h}x{w}x{c}");
        }
        if data.len() != t * h * w * c {
            bail!(Shape, "frame grid {t}x{h}x{w}x{c} needs {} values, got {}", t * h * w * c, data.len());
        }
        Ok(FrameGrid { t, h, w, c, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        FrameGrid { t, h, w, c, data: vec![0.0; t * h * w * c] }
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> &[f32] {
        let o = ((t * self.h + y) * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    /// Frames `start..end` as a new grid.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            bail!(Input, "frame range {start}..{end} outside 0..{}", self.t);
        }
        let n = self.frame_len();
        Self::new(end - start, self.h, self.w, self.c, self.data[start * n..end * n].to_vec())
    }

    /// Append the frames of `other`, which must share H, W, C.
    pub fn extend(&mut self, other: &FrameGrid) -> Result<()> {
        if (self.h, self.w, self.c) != (other.h, other.w, other.c) {
            bail!(Shape, "cannot join {}x{}x{} frames with {}x{}x{}", self.h, self.w, self.c, other.h, other.w, other.c);
        }
        self.data.extend_from_slice(&other.data);
        self.t += other.t;
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 4);
        buf.extend_from_slice(b"WLFG");
        for d in [self.t, self.h, self.w, self.c] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 20 || &buf[..4] != b"WLFG" {
            bail!(Format, "not a WLFG frame grid");
        }
        let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
        let n = t.checked_mul(h).and_then(|x| x.checked_mul(w)).and_then(|x| x.checked_mul(c));
        if n.and_then(|n| n.checked_mul(4)) != Some(buf.len() - 20) {
            bail!(Format, "WLFG payload length does not match {t}x{h}x{w}x{c}");
        }
        let data = buf[20..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Self::new(t, h, w, c, data).map_err(|e| crate::Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
