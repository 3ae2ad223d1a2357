//! End-to-end workflow: clip partitioning, stage-1 features, two-stage
//! segmentation, zero-shot prediction, dense captioning and PCA export.

pub mod bundle;
pub mod data;
pub mod infer;
pub mod pca;

pub use bundle::Stage1Bundle;
pub use infer::{dense_caption, extract_features, segment, segment_features, zero_shot, Caption, CaptionSet, ClipEmbedding};
pub use pca::{pca_export, Pca};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::vlm::FrameGrid;

const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub start_s: f64,
    pub end_s: f64,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Non-overlapping equal-length clips covering a video; the last may be partial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPartition {
    pub clip_s: f64,
    pub fps: f64,
    pub duration_s: f64,
    pub clips: Vec<Clip>,
}

impl ClipPartition {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Frames of a full-length clip.
    pub fn frames_per_clip(&self) -> usize {
        ((self.clip_s * self.fps).round() as usize).max(1)
    }

    /// Frames of clip `i`, repeating the last frame when the clip is short.
    pub fn clip_frames(&self, video: &FrameGrid, i: usize) -> Result<FrameGrid> {
        let Some(c) = self.clips.get(i) else {
            bail!(Index, "clip {i} of {}", self.clips.len());
        };
        let end = c.end_frame.min(video.frames());
        if c.start_frame >= end {
            bail!(Input, "video has {} frames, clip {i} starts at frame {}", video.frames(), c.start_frame);
        }
        let mut grid = video.slice(c.start_frame, end)?;
        let last = grid.slice(grid.frames() - 1, grid.frames())?;
        while grid.frames() < self.frames_per_clip() {
            grid.extend(&last)?;
        }
        Ok(grid)
    }
}

/// `ceil(duration / clip_s)` clips of `clip_s` seconds at `fps`.
pub fn partition(duration_s: f64, clip_s: f64, fps: f64) -> Result<ClipPartition> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        bail!(Input, "video length must be positive, got {duration_s}");
    }
    if !(clip_s > 0.0 && fps > 0.0) {
        bail!(Config, "clip length and fps must be positive");
    }
    let m = ((duration_s / clip_s) - TIME_EPS).ceil().max(1.0) as usize;
    let total = ((duration_s * fps).round() as usize).max(1);
    let clips = (0..m)
        .map(|i| {
            let start_s = i as f64 * clip_s;
            let end_s = ((i + 1) as f64 * clip_s).min(duration_s);
            let start_frame = ((start_s * fps).round() as usize).min(total - 1);
            let end_frame = ((end_s * fps).round() as usize).clamp(start_frame + 1, total);
            Clip { start_s, end_s, start_frame, end_frame }
        })
        .collect();
    Ok(ClipPartition { clip_s, fps, duration_s, clips })
}

/// Partition of a whole frame grid sampled at `fps`.
pub fn partition_video(video: &FrameGrid, clip_s: f64, fps: f64) -> Result<ClipPartition> {
    if video.frames() == 0 {
        bail!(Input, "video has no frames");
    }
    partition(video.frames() as f64 / fps, clip_s, fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        assert_eq!(partition(60.0, 10.0, 1.0).unwrap().len(), 6);
        let p = partition(65.0, 10.0, 1.0).unwrap();
        assert_eq!(p.len(), 7);
        assert_eq!((p.clips[6].start_s, p.clips[6].end_s), (60.0, 65.0));
        assert_eq!(partition(1.0, 1.0, 5.0).unwrap().len(), 1);
        assert!(matches!(partition(0.0, 1.0, 5.0), Err(crate::Error::Input(_))));
    }

    #[test]
    fn short_final_clip_is_padded() {
        let video = FrameGrid::new(7, 1, 1, 1, (0..7).map(|v| v as f32).collect()).unwrap();
        let p = partition_video(&video, 1.0, 5.0).unwrap();
        assert_eq!(p.len(), 2);
        let last = p.clip_frames(&video, 1).unwrap();
        assert_eq!(last.data(), &[5.0, 6.0, 6.0, 6.0, 6.0]);
        let covered: usize = p.clips.iter().map(|c| c.end_frame - c.start_frame).sum();
        assert_eq!(covered, 7);
    }
}
