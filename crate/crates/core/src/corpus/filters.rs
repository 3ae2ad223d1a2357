//! Frame validity filters for presentation-style footage.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::vlm::FrameGrid;

/// Default per-pixel noise threshold for static detection.
pub const NOISE_DELTA: f32 = 10.0 / 255.0;
pub const MIN_CROP: usize = 224;
pub const CROP_RESTARTS: usize = 256;

/// True when at least half of the pixels changed by more than `delta` in some channel.
pub fn detect_static(frame: &[f32], prev: &[f32], channels: usize, delta: f32) -> Result<bool> {
    if frame.len() != prev.len() || channels == 0 || !frame.len().is_multiple_of(channels) {
        bail!(Input, "frames of {} and {} values with {channels} channels cannot be compared", frame.len(), prev.len());
    }
    let pixels = frame.len() / channels;
    if pixels == 0 {
        bail!(Input, "empty frame");
    }
    let differing = frame
        .chunks_exact(channels)
        .zip(prev.chunks_exact(channels))
        .filter(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max) > delta)
        .count();
    Ok(2 * differing >= pixels)
}

/// Sliding boolean median over `round(window_s * fps)` samples (forced odd), edges replicated.
pub fn median_filter_validity(signal: &[bool], fps: f64, window_s: f64) -> Result<Vec<bool>> {
    if !(fps > 0.0) || !(window_s > 0.0) {
        bail!(Config, "fps and window must be positive");
    }
    let mut w = ((window_s * fps).round() as usize).max(1);
    if w.is_multiple_of(2) {
        w += 1;
    }
    let half = (w / 2) as isize;
    let n = signal.len() as isize;
    Ok((0..n)
        .map(|i| {
            let ones = (i - half..=i + half).filter(|&j| signal[j.clamp(0, n - 1) as usize]).count();
            2 * ones > w
        })
        .collect())
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl TextBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        TextBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersects(&self, o: &TextBox) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

/// Occupancy prefix sums for O(1) emptiness queries.
struct Occupancy {
    w: usize,
    sums: Vec<u32>,
}

impl Occupancy {
    fn new(w: usize, h: usize, boxes: &[TextBox]) -> Self {
        let mut grid = vec![0u32; w * h];
        for b in boxes {
            for y in b.y0.min(h)..b.y1.min(h) {
                for x in b.x0.min(w)..b.x1.min(w) {
                    grid[y * w + x] = 1;
                }
            }
        }
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            for x in 0..w {
                sums[(y + 1) * (w + 1) + x + 1] = grid[y * w + x] + sums[y * (w + 1) + x + 1] + sums[(y + 1) * (w + 1) + x] - sums[y * (w + 1) + x];
            }
        }
        Occupancy { w, sums }
    }

    fn empty(&self, r: &TextBox) -> bool {
        let s = |x: usize, y: usize| self.sums[y * (self.w + 1) + x];
        s(r.x1, r.y1) + s(r.x0, r.y0) == s(r.x0, r.y1) + s(r.x1, r.y0)
    }
}

/// Largest text-free crop by randomized seed-rectangle growth, or `None` when
/// the best crop is smaller than `min_size` on either side.
///
/// Each restart samples a free pixel and grows its 1×1 rectangle one side at a
/// time (random order), pushing each side as far as it stays free, until no
/// side can move.
pub fn crop_search(width: usize, height: usize, boxes: &[TextBox], min_size: usize, iters: usize, seed: u64) -> Option<TextBox> {
    if width == 0 || height == 0 {
        return None;
    }
    let full = TextBox::new(0, 0, width, height);
    let best = if boxes.iter().all(|b| !b.intersects(&full)) {
        Some(full)
    } else {
        let occ = Occupancy::new(width, height, boxes);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut best: Option<TextBox> = None;
        for _ in 0..iters.max(1) {
            let Some(r) = grow_from_random_point(&occ, width, height, &mut rng) else {
                continue;
            };
            if best.is_none_or(|b| r.area() > b.area()) {
                best = Some(r);
            }
        }
        best
    };
    best.filter(|r| r.width() >= min_size && r.height() >= min_size)
}

fn grow_from_random_point(occ: &Occupancy, w: usize, h: usize, rng: &mut impl Rng) -> Option<TextBox> {
    let mut seed = None;
    for _ in 0..64 {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let r = TextBox::new(x, y, x + 1, y + 1);
        if occ.empty(&r) {
            seed = Some(r);
            break;
        }
    }
    let mut r = seed?;
    let mut sides = [0usize, 1, 2, 3];
    loop {
        for i in (1..4).rev() {
            sides.swap(i, rng.gen_range(0..=i));
        }
        let mut moved = false;
        for &side in &sides {
            loop {
                let next = match side {
                    0 if r.x0 > 0 => TextBox { x0: r.x0 - 1, ..r },
                    1 if r.y0 > 0 => TextBox { y0: r.y0 - 1, ..r },
                    2 if r.x1 < w => TextBox { x1: r.x1 + 1, ..r },
                    3 if r.y1 < h => TextBox { y1: r.y1 + 1, ..r },
                    _ => break,
                };
                if !occ.empty(&next) {
                    break;
                }
                r = next;
                moved = true;
            }
        }
        if !moved {
            return Some(r);
        }
    }
}

/// Pluggable face detector; returns the detected face boxes.
pub trait FaceDetector {
    fn detect(&self, frame: &[f32], height: usize, width: usize, channels: usize) -> std::result::Result<Vec<TextBox>, String>;
}

/// Detector that never finds a face.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoFaces;

impl FaceDetector for NoFaces {
    fn detect(&self, _: &[f32], _: usize, _: usize, _: usize) -> std::result::Result<Vec<TextBox>, String> {
        Ok(Vec::new())
    }
}

/// Valid iff the detector reports no face. Detector failures count as non-valid.
pub fn face_gate(frame: &[f32], height: usize, width: usize, channels: usize, detector: &dyn FaceDetector) -> bool {
    match detector.detect(frame, height, width, channels) {
        Ok(faces) => faces.is_empty(),
        Err(e) => {
            log::warn!("face detector failed, marking frame non-valid: {e}");
            false
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub delta: f32,
    pub min_crop: usize,
    pub crop_restarts: usize,
    pub window_s: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { delta: NOISE_DELTA, min_crop: MIN_CROP, crop_restarts: CROP_RESTARTS, window_s: 3.0, seed: 0 }
    }
}

/// Per-frame validity of a video: face gate, motion and crop feasibility, then the median filter.
///
/// `boxes[t]` lists the text boxes of frame `t` (missing entries mean none).
/// The first frame has no predecessor and is compared with the second.
pub fn validity(video: &FrameGrid, fps: f64, boxes: &[Vec<TextBox>], detector: &dyn FaceDetector, cfg: &FilterConfig) -> Result<Vec<bool>> {
    let (t, h, w, c) = (video.frames(), video.height(), video.width(), video.channels());
    let mut raw = Vec::with_capacity(t);
    for i in 0..t {
        let frame = video.frame(i);
        let prev = match (i, t) {
            (0, 1) => frame,
            (0, _) => video.frame(1),
            _ => video.frame(i - 1),
        };
        let moving = detect_static(frame, prev, c, cfg.delta)?;
        let frame_boxes = boxes.get(i).map_or(&[][..], Vec::as_slice);
        let crop = crop_search(w, h, frame_boxes, cfg.min_crop.min(w).min(h), cfg.crop_restarts, cfg.seed).is_some();
        raw.push(moving && crop && face_gate(frame, h, w, c, detector));
    }
    median_filter_validity(&raw, fps, cfg.window_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_detection_examples() {
        let a = vec![0.5f32; 10 * 3];
        assert!(!detect_static(&a, &a, 3, NOISE_DELTA).unwrap());
        let mut b = a.clone();
        for v in b.iter_mut().take(6 * 3) {
            *v += 0.2;
        }
        assert!(detect_static(&b, &a, 3, NOISE_DELTA).unwrap());
        let c: Vec<f32> = a.iter().map(|v| v + NOISE_DELTA / 2.0).collect();
        assert!(!detect_static(&c, &a, 3, NOISE_DELTA).unwrap());
        assert!(detect_static(&a[..3], &a, 3, NOISE_DELTA).is_err());
    }

    #[test]
    fn median_examples() {
        let f = |s: &[u8]| s.iter().map(|&b| b == 1).collect::<Vec<_>>();
        assert_eq!(median_filter_validity(&f(&[1, 1, 0, 1, 1]), 1.0, 3.0).unwrap(), f(&[1, 1, 1, 1, 1]));
        assert_eq!(median_filter_validity(&f(&[0, 0, 1, 0, 0]), 1.0, 3.0).unwrap(), f(&[0; 5]));
        assert_eq!(median_filter_validity(&f(&[1; 4]), 1.0, 3.0).unwrap(), f(&[1; 4]));
        // window 2 at 1 fps rounds to 2 and is widened to 3
        assert_eq!(median_filter_validity(&f(&[1, 0, 1]), 1.0, 2.0).unwrap(), f(&[1, 1, 1]));
    }

    #[test]
    fn crop_examples() {
        assert_eq!(crop_search(50, 40, &[], 10, 8, 0), Some(TextBox::new(0, 0, 50, 40)));
        let r = crop_search(100, 100, &[TextBox::new(40, 40, 60, 60)], 20, CROP_RESTARTS, 1).unwrap();
        assert_eq!(r.area(), 4000);
        let boxes = [TextBox::new(200, 0, 300, 300), TextBox::new(0, 200, 200, 300)];
        assert_eq!(crop_search(300, 300, &boxes, 224, CROP_RESTARTS, 2), None);
        assert_eq!(crop_search(300, 300, &boxes, 200, CROP_RESTARTS, 2), Some(TextBox::new(0, 0, 200, 200)));
    }

    struct Fixed(std::result::Result<Vec<TextBox>, String>);
    impl FaceDetector for Fixed {
        fn detect(&self, _: &[f32], _: usize, _: usize, _: usize) -> std::result::Result<Vec<TextBox>, String> {
            self.0.clone()
        }
    }

    #[test]
    fn face_gate_contract() {
        let f = [0.0f32; 12];
        assert!(face_gate(&f, 2, 2, 3, &NoFaces));
        assert!(!face_gate(&f, 2, 2, 3, &Fixed(Ok(vec![TextBox::new(0, 0, 1, 1)]))));
        assert!(!face_gate(&f, 2, 2, 3, &Fixed(Err("boom".into()))));
    }
}
