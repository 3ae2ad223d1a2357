use serde::{Deserialize, Serialize};

use super::bundle::Stage1Bundle;
use super::ClipPartition;
use crate::error::{bail, Result};
use crate::temporal::{FramePrediction, TemporalModel};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::timeline::PhaseTimeline;
use crate::vlm::model::DecodeMode;
use crate::vlm::FrameGrid;

/// Longest caption chunk in seconds.
pub const CHUNK_S: f64 = 10.0;

/// `[L, D]` features: per clip, decoder states over the alignment prompt, bridged.
pub fn extract_features(b: &Stage1Bundle, video: &FrameGrid, part: &ClipPartition) -> Result<Tensor<f32>> {
    let prompt = b.prompts()?.align;
    let d = b.model.cfg.feature_dim;
    let mut data = Vec::with_capacity(part.len() * d);
    for i in 0..part.len() {
        let clip = part.clip_frames(video, i)?;
        let g = Graph::inference(&b.store);
        let v = b.model.encode_video(&g, &clip)?;
        let f = b.model.clip_feature(&g, v, &prompt)?;
        data.extend_from_slice(g.value(f).data());
    }
    Tensor::new(&[part.len(), d], data)
}

/// Final-stage prediction of a feature sequence merged into a timeline.
pub fn segment_features(
    model: &TemporalModel,
    store: &ParamStore<f32>,
    video_id: &str,
    features: &Tensor<f32>,
    part: &ClipPartition,
) -> Result<(PhaseTimeline, FramePrediction)> {
    let mut preds = model.predict(store, features)?;
    let last = preds.pop().expect("at least one stage");
    let tl = PhaseTimeline::from_labels(video_id, &last.labels, &model.cfg.names(), part.clip_s, Some(part.duration_s))?;
    Ok((tl, last))
}

/// Two-stage segmentation of one video.
pub fn segment(
    stage1: &Stage1Bundle,
    model: &TemporalModel,
    store: &ParamStore<f32>,
    video_id: &str,
    video: &FrameGrid,
    part: &ClipPartition,
) -> Result<(PhaseTimeline, FramePrediction)> {
    let features = extract_features(stage1, video, part)?;
    segment_features(model, store, video_id, &features, part)
}

/// Projected (unnormalised) tokens and their pooling weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEmbedding {
    pub tokens: Tensor<f32>,
    pub weights: Vec<f32>,
}

fn embedding(g: &Graph<'_, f32>, x: Var, proj: &crate::vlm::layers::Linear, score: &crate::vlm::layers::Linear) -> Result<ClipEmbedding> {
    let n = g.shape(x)[0];
    let tokens = g.to_tensor(proj.forward(g, x)?);
    let s = g.reshape(score.forward(g, x)?, &[1, n])?;
    let weights = g.value(g.softmax(s)?).data().to_vec();
    Ok(ClipEmbedding { tokens, weights })
}

impl Stage1Bundle {
    pub fn embed_video(&self, clip: &FrameGrid) -> Result<ClipEmbedding> {
        let g = Graph::inference(&self.store);
        let v = self.model.encode_video(&g, clip)?;
        embedding(&g, v, &self.model.head.proj_v, &self.model.head.score_v)
    }

    /// Embedding of `sentence` behind the alignment prompt, as in contrastive training.
    pub fn embed_text(&self, sentence: &str) -> Result<ClipEmbedding> {
        let mut ids = self.prompts()?.align;
        ids.extend(self.vocab.encode(sentence));
        let g = Graph::inference(&self.store);
        let t = self.model.encode_text(&g, &ids)?;
        embedding(&g, t, &self.model.head.proj_t, &self.model.head.score_t)
    }
}

fn unit_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2();
    (0..n)
        .map(|i| {
            let r: Vec<f64> = t.row(i).iter().map(|&v| v as f64).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Fine-grained similarity of a text and a video embedding (rows are L2-normalised first).
pub fn fine_grained_score(text: &ClipEmbedding, video: &ClipEmbedding) -> f64 {
    let (t, v) = (unit_rows(&text.tokens), unit_rows(&video.tokens));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let text_side: f64 =
        t.iter().zip(&text.weights).map(|(ti, &w)| w as f64 * v.iter().map(|vj| dot(ti, vj)).fold(f64::NEG_INFINITY, f64::max)).sum();
    let video_side: f64 =
        v.iter().zip(&video.weights).map(|(vj, &w)| w as f64 * t.iter().map(|ti| dot(ti, vj)).fold(f64::NEG_INFINITY, f64::max)).sum();
    0.5 * (text_side + video_side)
}

/// Index of the highest-scoring prototype (first on ties).
pub fn best_class(video: &ClipEmbedding, prototypes: &[ClipEmbedding]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, p) in prototypes.iter().enumerate() {
        let s = fine_grained_score(p, video);
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Clip-wise zero-shot labels by similarity to the prototype sentences of `classes`.
///
/// `classes` holds `(label, prototype sentence)` pairs.
pub fn zero_shot(
    b: &Stage1Bundle,
    video_id: &str,
    video: &FrameGrid,
    part: &ClipPartition,
    classes: &[(String, String)],
) -> Result<(PhaseTimeline, Vec<usize>)> {
    if classes.len() < 2 {
        bail!(Config, "zero-shot prediction needs at least two classes, got {}", classes.len());
    }
    let protos: Vec<ClipEmbedding> = classes.iter().map(|(_, s)| b.embed_text(s)).collect::<Result<_>>()?;
    let labels: Vec<usize> =
        (0..part.len()).map(|i| Ok(best_class(&b.embed_video(&part.clip_frames(video, i)?)?, &protos))).collect::<Result<_>>()?;
    let names: Vec<String> = classes.iter().map(|(l, _)| l.clone()).collect();
    let tl = PhaseTimeline::from_labels(video_id, &labels, &names, part.clip_s, Some(part.duration_s))?;
    Ok((tl, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub video_id: String,
    pub captions: Vec<Caption>,
}

/// Consecutive chunks of at most [`CHUNK_S`] seconds covering `[start, end)`.
pub fn chunks(start: f64, end: f64) -> Vec<(f64, f64)> {
    let n = (((end - start) / CHUNK_S) - 1e-9).ceil().max(1.0) as usize;
    (0..n).map(|k| (start + k as f64 * CHUNK_S, (start + (k + 1) as f64 * CHUNK_S).min(end))).collect()
}

/// Captions for every non-idle segment of a predicted timeline, one per chunk,
/// generated from all frames of the chunk.
pub fn dense_caption(b: &Stage1Bundle, timeline: &PhaseTimeline, video: &FrameGrid, fps: f64, idle_label: &str) -> Result<CaptionSet> {
    let prompt = b.prompts()?.caption;
    let max_len = b.model.cfg.max_text_len.saturating_sub(prompt.len());
    let mut captions = Vec::new();
    for seg in timeline.segments.iter().filter(|s| s.label != idle_label) {
        for (s, e) in chunks(seg.start_s, seg.end_s) {
            let f0 = ((s * fps).round() as usize).min(video.frames().saturating_sub(1));
            let f1 = ((e * fps).round() as usize).clamp(f0 + 1, video.frames());
            let clip = video.slice(f0, f1)?;
            let tokens = {
                let g = Graph::inference(&b.store);
                let v = b.model.encode_video(&g, &clip)?;
                g.to_tensor(v)
            };
            let ids = b.model.generate_caption(&b.store, &b.vocab, &tokens, &prompt, max_len.max(1), DecodeMode::Greedy)?;
            captions.push(Caption { start_s: s, end_s: e, text: b.vocab.decode(&ids)? });
        }
    }
    Ok(CaptionSet { video_id: timeline.video_id.clone(), captions })
}
