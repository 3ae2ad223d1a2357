//! Labelled phase timelines and their JSON form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

impl Segment {
    pub fn new(start_s: f64, end_s: f64, label: impl Into<String>) -> Self {
        Segment { start_s, end_s, label: label.into() }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimeline {
    pub video_id: String,
    pub fps: f64,
    pub segments: Vec<Segment>,
}

impl PhaseTimeline {
    /// Merge runs of equal labels; position `i` spans `[i * clip_s, (i + 1) * clip_s)`,
    /// the last one ending at `duration` when given.
    pub fn from_labels(video_id: &str, labels: &[usize], names: &[String], clip_s: f64, duration: Option<f64>) -> Result<Self> {
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            let Some(name) = names.get(l) else {
                bail!(Index, "label {l} has no name ({} known)", names.len());
            };
            let (s, e) = (i as f64 * clip_s, (i + 1) as f64 * clip_s);
            match segments.last_mut() {
                Some(last) if last.label == *name => last.end_s = e,
                _ => segments.push(Segment::new(s, e, name.clone())),
            }
        }
        if let (Some(d), Some(last)) = (duration, segments.last_mut()) {
            if d > last.start_s {
                last.end_s = d;
            }
        }
        Ok(PhaseTimeline { video_id: video_id.to_string(), fps: 1.0 / clip_s, segments })
    }

    pub fn duration(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end_s)
    }

    /// Sorted, non-overlapping, positive-length segments; with `gap_free`
    /// they also tile `[0, duration)`.
    pub fn validate(&self, gap_free: bool) -> Result<()> {
        let mut prev_end = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.start_s.is_finite() && s.end_s.is_finite()) || s.end_s <= s.start_s {
                bail!(Input, "{}: segment {i} has non-positive length", self.video_id);
            }
            if s.start_s < prev_end - TIME_EPS {
                bail!(Input, "{}: segment {i} overlaps its predecessor", self.video_id);
            }
            if gap_free && (s.start_s - prev_end).abs() > TIME_EPS {
                bail!(Input, "{}: gap before segment {i}", self.video_id);
            }
            prev_end = s.end_s;
        }
        Ok(())
    }

    /// Label of every frame at `fps` (sampled at frame centres) over `frames`
    /// frames; `None` where no segment covers the instant.
    pub fn rasterize(&self, fps: f64, frames: usize) -> Vec<Option<&str>> {
        let mut out = Vec::with_capacity(frames);
        let mut k = 0;
        for i in 0..frames {
            let t = (i as f64 + 0.5) / fps;
            while k < self.segments.len() && self.segments[k].end_s <= t {
                k += 1;
            }
            out.push(self.segments.get(k).filter(|s| s.start_s <= t).map(|s| s.label.as_str()));
        }
        out
    }

    /// Number of frames covering the timeline at `fps`.
    pub fn frame_count(&self, fps: f64) -> usize {
        (self.duration() * fps - TIME_EPS).ceil().max(0.0) as usize
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Read a JSON file holding either one timeline or an array of them.
pub fn load_many(path: &Path) -> Result<Vec<PhaseTimeline>> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(if v.is_array() { serde_json::from_value(v)? } else { vec![serde_json::from_value(v)?] })
}

pub fn save_many(path: &Path, timelines: &[PhaseTimeline]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(timelines)?)?;
    Ok(())
}
