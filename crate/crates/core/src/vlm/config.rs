use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Stage-1 architecture. Defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub patch: usize,
    /// Frames sampled per clip (N_v).
    pub n_frames: usize,
    pub c_v: usize,
    pub c_t: usize,
    pub video_layers: usize,
    /// Text encoder depth; the decoder reuses these layers and adds one cross-attention per layer.
    pub text_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Shared contrastive space width.
    pub embed_dim: usize,
    /// Stage-2 feature width produced by the bridge.
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_h: 32,
            frame_w: 32,
            channels: 3,
            patch: 8,
            n_frames: 8,
            c_v: 64,
            c_t: 64,
            video_layers: 2,
            text_layers: 2,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 512,
            max_text_len: 32,
            embed_dim: 64,
            feature_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Spatial tokens per frame (S_v).
    pub fn spatial_tokens(&self) -> usize {
        (self.frame_h / self.patch) * (self.frame_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.frame_h,
            self.frame_w,
            self.channels,
            self.patch,
            self.n_frames,
            self.c_v,
            self.c_t,
            self.heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_text_len,
            self.embed_dim,
            self.feature_dim,
        ];
        if positive.contains(&0) {
            bail!(Config, "model dimensions must be positive");
        }
        if !self.c_v.is_multiple_of(self.heads) || !self.c_t.is_multiple_of(self.heads) {
            bail!(Config, "C_v={} and C_t={} must be divisible by {} heads", self.c_v, self.c_t, self.heads);
        }
        if !self.frame_h.is_multiple_of(self.patch) || !self.frame_w.is_multiple_of(self.patch) {
            bail!(Config, "frame {}x{} not divisible by patch {}", self.frame_h, self.frame_w, self.patch);
        }
        if self.video_layers == 0 || self.text_layers == 0 {
            bail!(Config, "encoders need at least one layer");
        }
        if self.vocab_size <= 5 {
            bail!(Config, "vocabulary must hold more than the reserved tokens");
        }
        Ok(())
    }
}
