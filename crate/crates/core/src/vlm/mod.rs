//! Stage-1 video-language model: encoders, weight-shared multimodal decoder,
//! contrastive pooling head and caption generation.

pub mod config;
pub mod frames;
pub mod layers;
pub mod model;
pub mod vocab;

pub use config::ModelConfig;
pub use frames::FrameGrid;
pub use model::{DecodeMode, LoraTargets, Stage1Model};
pub use vocab::Vocabulary;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor};

/// Encoded clip, `[N_v, S_v, C_v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTokens(pub Tensor<f32>);

/// Encoded text with its ids and maskable-position flags.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTokens {
    pub tokens: Tensor<f32>,
    pub ids: Vec<usize>,
    pub mask_flags: Vec<bool>,
}

impl VideoTokens {
    /// Token rows flattened to `[N_v * S_v, C_v]`.
    pub fn flat(&self) -> Tensor<f32> {
        let s = self.0.shape();
        self.0.reshape(&[s[0] * s[1], s[2]]).expect("rank-3 tokens")
    }
}

impl Stage1Model {
    pub fn video_tokens(&self, store: &ParamStore<f32>, clip: &FrameGrid) -> Result<VideoTokens> {
        let g = Graph::inference(store);
        let v = self.encode_video(&g, clip)?;
        let t = g.to_tensor(v).reshape(&[self.cfg.n_frames, self.cfg.spatial_tokens(), self.cfg.c_v])?;
        Ok(VideoTokens(t))
    }

    /// Encode `prompt ++ text`; only text positions with non-reserved ids are maskable.
    pub fn text_tokens(&self, store: &ParamStore<f32>, prompt: &[usize], text: &[usize]) -> Result<TextTokens> {
        let ids: Vec<usize> = prompt.iter().chain(text).copied().collect();
        let g = Graph::inference(store);
        let t = self.encode_text(&g, &ids)?;
        let mask_flags = (0..ids.len()).map(|i| i >= prompt.len() && !Vocabulary::is_reserved(ids[i])).collect();
        Ok(TextTokens { tokens: g.to_tensor(t), ids, mask_flags })
    }
}
