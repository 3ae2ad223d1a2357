use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, WeightedIndex};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::config::ModelConfig;
use super::frames::FrameGrid;
use super::layers::{causal_mask, Attention, Block, LayerNorm, Linear, INIT_STD};
use super::vocab::{Vocabulary, BOS, EOS, MASK, PAD, UNK};
use crate::error::{bail, Result};
use crate::temporal::bridge::Bridge;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const CAPTION_PROMPT: &str = "Describe the video with natural language";
pub const ALIGN_PROMPT: &str = "Project the inputs into common space";

/// Frame indices for uniform inclusive sampling of `n` out of `t` frames.
///
/// `floor(i * (t - 1) / (n - 1))`; shorter clips repeat frames.
pub fn sample_frame_indices(t: usize, n: usize) -> Result<Vec<usize>> {
    if t == 0 {
        bail!(Input, "clip has no frames");
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n).map(|i| i * (t - 1) / (n - 1)).collect())
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub patch: Linear,
    pub pos_spatial: ParamId,
    pub pos_temporal: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct CrossLayer {
    pub ln: LayerNorm,
    pub attn: Attention,
}

/// Token projections, token-weight scorers and temperature for the fine-grained similarity.
#[derive(Clone, Debug)]
pub struct SimilarityHead {
    pub proj_t: Linear,
    pub proj_v: Linear,
    pub score_t: Linear,
    pub score_v: Linear,
    pub log_tau: ParamId,
}

/// Projected unit-norm tokens and their softmax weights.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub tokens: Var,
    pub weights: Var,
}

/// Which attention projections receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LoraTargets {
    pub video: bool,
    pub text: bool,
    pub cross: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets { video: true, text: true, cross: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Stage-1 video-language model: layout of parameter ids over a [`ParamStore`].
///
/// The decoder reuses the text encoder's self-attention, feed-forward and
/// layer-norm weights and adds one cross-attention per layer.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub cfg: ModelConfig,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    pub cross: Vec<CrossLayer>,
    pub dec_ln_f: LayerNorm,
    pub lm_head: Linear,
    pub head: SimilarityHead,
    pub bridge: Bridge,
    pub(crate) merged: bool,
}

impl Stage1Model {
    /// Register all parameters in `store`, initialised from `seed`.
    pub fn build<S: Real>(cfg: &ModelConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let rng = &mut rng;
        let sv = cfg.spatial_tokens();
        let video = VideoEncoder {
            patch: Linear::new(store, "video.patch", cfg.patch_dim(), cfg.c_v, rng)?,
            pos_spatial: store.add_normal("video.pos_spatial", &[sv, cfg.c_v], INIT_STD, rng)?,
            pos_temporal: store.add_normal("video.pos_temporal", &[cfg.n_frames, cfg.c_v], INIT_STD, rng)?,
            blocks: (0..cfg.video_layers)
                .map(|l| Block::new(store, &format!("video.{l}"), cfg.c_v, cfg.heads, cfg.ffn_dim, rng))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(store, "video.ln_f", cfg.c_v)?,
        };
        let text = TextEncoder {
            tokens: store.add_normal("text.tokens", &[cfg.vocab_size, cfg.c_t], INIT_STD, rng)?,
            positions: store.add_normal("text.positions", &[cfg.max_text_len, cfg.c_t], INIT_STD, rng)?,
            blocks: (0..cfg.text_layers)
                .map(|l| Block::new(store, &format!("text.{l}"), cfg.c_t, cfg.heads, cfg.ffn_dim, rng))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(store, "text.ln_f", cfg.c_t)?,
        };
        let cross = (0..cfg.text_layers)
            .map(|l| {
                Ok(CrossLayer {
                    ln: LayerNorm::new(store, &format!("decoder.{l}.ln"), cfg.c_t)?,
                    attn: Attention::new(store, &format!("decoder.{l}.cross"), cfg.c_t, cfg.c_v, cfg.heads, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let dec_ln_f = LayerNorm::new(store, "decoder.ln_f", cfg.c_t)?;
        let lm_head = Linear::new(store, "decoder.lm_head", cfg.c_t, cfg.vocab_size, rng)?;
        let head = SimilarityHead {
            proj_t: Linear::new(store, "head.proj_t", cfg.c_t, cfg.embed_dim, rng)?,
            proj_v: Linear::new(store, "head.proj_v", cfg.c_v, cfg.embed_dim, rng)?,
            score_t: Linear::new(store, "head.score_t", cfg.c_t, 1, rng)?,
            score_v: Linear::new(store, "head.score_v", cfg.c_v, 1, rng)?,
            log_tau: store.add("head.log_tau", Tensor::scalar(S::lit(0.07f64.ln())))?,
        };
        let bridge = Bridge::new(store, "bridge", cfg.c_t, cfg.feature_dim, rng)?;
        Ok(Stage1Model { cfg: cfg.clone(), video, text, cross, dec_ln_f, lm_head, head, bridge, merged: false })
    }

    /// Model plus a fresh `f32` store.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let m = Self::build(cfg, &mut store, seed)?;
        Ok((m, store))
    }

    /// Patch rows `[N_v * S_v, patch_dim]` of the uniformly sampled frames.
    pub fn patchify<S: Real>(&self, clip: &FrameGrid) -> Result<Tensor<S>> {
        let cfg = &self.cfg;
        if (clip.height(), clip.width(), clip.channels()) != (cfg.frame_h, cfg.frame_w, cfg.channels) {
            bail!(
                Shape,
                "clip frames are {}x{}x{}, model expects {}x{}x{}",
                clip.height(),
                clip.width(),
                clip.channels(),
                cfg.frame_h,
                cfg.frame_w,
                cfg.channels
            );
        }
        let idx = sample_frame_indices(clip.frames(), cfg.n_frames)?;
        let (p, c) = (cfg.patch, cfg.channels);
        let (gh, gw) = (cfg.frame_h / p, cfg.frame_w / p);
        let mut data = Vec::with_capacity(idx.len() * gh * gw * cfg.patch_dim());
        for &f in &idx {
            for py in 0..gh {
                for px in 0..gw {
                    for y in 0..p {
                        for x in 0..p {
                            for &v in clip.pixel(f, py * p + y, px * p + x).iter().take(c) {
                                data.push(S::lit(v as f64));
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[idx.len() * gh * gw, cfg.patch_dim()], data)
    }

    /// Video tokens `[N_v * S_v, C_v]` (frame-major).
    pub fn encode_video<S: Real>(&self, g: &Graph<'_, S>, clip: &FrameGrid) -> Result<Var> {
        let patches = g.input(self.patchify(clip)?)?;
        self.encode_patches(g, patches)
    }

    pub fn encode_patches<S: Real>(&self, g: &Graph<'_, S>, patches: Var) -> Result<Var> {
        let (nv, sv) = (self.cfg.n_frames, self.cfg.spatial_tokens());
        let mut x = self.video.patch.forward(g, patches)?;
        let spatial: Vec<usize> = (0..nv * sv).map(|k| k % sv).collect();
        let temporal: Vec<usize> = (0..nv * sv).map(|k| k / sv).collect();
        x = g.add(x, g.gather_rows(g.param(self.video.pos_spatial), &spatial)?)?;
        x = g.add(x, g.gather_rows(g.param(self.video.pos_temporal), &temporal)?)?;
        for b in &self.video.blocks {
            x = b.forward(g, x, None)?;
        }
        self.video.ln_f.forward(g, x)
    }

    fn check_text(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            bail!(Input, "empty token sequence");
        }
        if ids.len() > self.cfg.max_text_len {
            bail!(Input, "sequence of {} tokens exceeds maximum {}", ids.len(), self.cfg.max_text_len);
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            bail!(Vocab, "token id {bad} outside vocabulary of {}", self.cfg.vocab_size);
        }
        Ok(())
    }

    /// Token plus position embeddings `[N, C_t]`.
    pub fn embed_tokens<S: Real>(&self, g: &Graph<'_, S>, ids: &[usize]) -> Result<Var> {
        self.check_text(ids)?;
        let tok = g.gather_rows(g.param(self.text.tokens), ids)?;
        let pos: Vec<usize> = (0..ids.len()).collect();
        g.add(tok, g.gather_rows(g.param(self.text.positions), &pos)?)
    }

    /// Bidirectional text encoding `[N, C_t]` of an already prompt-prefixed sequence.
    pub fn encode_text<S: Real>(&self, g: &Graph<'_, S>, ids: &[usize]) -> Result<Var> {
        let mut x = self.embed_tokens(g, ids)?;
        for b in &self.text.blocks {
            x = b.forward(g, x, None)?;
        }
        self.text.ln_f.forward(g, x)
    }

    /// Vocabulary logits `[N, |V|]` for a token sequence attending over `video` tokens.
    pub fn decode<S: Real>(&self, g: &Graph<'_, S>, ids: &[usize], video: Var, causal: bool) -> Result<Var> {
        let x = self.embed_tokens(g, ids)?;
        self.decode_embedded(g, x, video, causal)
    }

    /// Last-layer decoder states `[N, C_t]` before the LM head.
    pub fn decoder_states<S: Real>(&self, g: &Graph<'_, S>, x: Var, video: Var, causal: bool) -> Result<Var> {
        let n = g.shape(x)[0];
        let mask = if causal && n > 1 { Some(g.input(causal_mask(n))?) } else { None };
        let mut x = x;
        for (block, cross) in self.text.blocks.iter().zip(&self.cross) {
            x = block.self_attend(g, x, mask)?;
            let h = cross.ln.forward(g, x)?;
            x = g.add(x, cross.attn.forward(g, h, video, None)?)?;
            x = block.feed_forward(g, x)?;
        }
        self.dec_ln_f.forward(g, x)
    }

    pub fn decode_embedded<S: Real>(&self, g: &Graph<'_, S>, x: Var, video: Var, causal: bool) -> Result<Var> {
        let h = self.decoder_states(g, x, video, causal)?;
        self.lm_head.forward(g, h)
    }

    fn pool<S: Real>(&self, g: &Graph<'_, S>, x: Var, proj: &Linear, score: &Linear) -> Result<Pooled> {
        let tokens = g.l2_normalize_rows(proj.forward(g, x)?)?;
        let n = g.shape(x)[0];
        let s = g.reshape(score.forward(g, x)?, &[1, n])?;
        let weights = g.reshape(g.softmax(s)?, &[n])?;
        Ok(Pooled { tokens, weights })
    }

    pub fn pool_text<S: Real>(&self, g: &Graph<'_, S>, text: Var) -> Result<Pooled> {
        self.pool(g, text, &self.head.proj_t, &self.head.score_t)
    }

    pub fn pool_video<S: Real>(&self, g: &Graph<'_, S>, video: Var) -> Result<Pooled> {
        self.pool(g, video, &self.head.proj_v, &self.head.score_v)
    }

    /// `[D]` stage-2 feature of one clip: decoder states over the alignment prompt, bridged.
    pub fn clip_feature<S: Real>(&self, g: &Graph<'_, S>, video: Var, prompt_ids: &[usize]) -> Result<Var> {
        let x = self.embed_tokens(g, prompt_ids)?;
        let h = self.decoder_states(g, x, video, false)?;
        self.bridge.forward(g, h)
    }

    /// Greedy or temperature-sampled caption continuation of `prompt_ids`.
    ///
    /// Each step appends MASK to the current sequence and reads the prediction
    /// at that slot. Stops after EOS, a sentence terminator, `max_len` tokens,
    /// or when the sequence reaches the model's maximum length.
    pub fn generate_caption(
        &self,
        store: &ParamStore<f32>,
        vocab: &Vocabulary,
        video_tokens: &Tensor<f32>,
        prompt_ids: &[usize],
        max_len: usize,
        mode: DecodeMode,
    ) -> Result<Vec<usize>> {
        if max_len == 0 {
            bail!(Config, "max_len must be at least 1");
        }
        let mut rng = match mode {
            DecodeMode::Sample { seed, .. } => Some(Xoshiro256PlusPlus::seed_from_u64(seed)),
            DecodeMode::Greedy => None,
        };
        let mut out = Vec::new();
        while out.len() < max_len && prompt_ids.len() + out.len() < self.cfg.max_text_len {
            let mut seq = prompt_ids.to_vec();
            seq.extend(&out);
            seq.push(MASK);
            let g = Graph::inference(store);
            let video = g.input(video_tokens.clone())?;
            let logits = self.decode(&g, &seq, video, true)?;
            let val = g.value(logits);
            let row = val.row(seq.len() - 1);
            let allowed = |i: usize| !matches!(i, PAD | MASK | BOS | UNK) && i < vocab.len();
            let next = match (&mode, rng.as_mut()) {
                (DecodeMode::Sample { temperature, .. }, Some(rng)) => {
                    let t = temperature.max(1e-6);
                    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let w: Vec<f64> = row.iter().enumerate().map(|(i, &l)| if allowed(i) { ((l as f64 - m) / t).exp() } else { 0.0 }).collect();
                    WeightedIndex::new(&w).map_err(|e| crate::Error::Numeric(e.to_string()))?.sample(rng)
                }
                _ => {
                    let mut best = EOS;
                    for i in (0..row.len()).filter(|&i| allowed(i)) {
                        if row[i] > row[best] {
                            best = i;
                        }
                    }
                    best
                }
            };
            out.push(next);
            if next == EOS || vocab.is_terminator(next) {
                break;
            }
        }
        Ok(out)
    }

    /// Mutable q and v projections of the selected attention layers.
    pub fn lora_targets_mut(&mut self, targets: LoraTargets) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        if targets.video {
            for b in &mut self.video.blocks {
                out.push(&mut b.attn.q);
                out.push(&mut b.attn.v);
            }
        }
        if targets.text {
            for b in &mut self.text.blocks {
                out.push(&mut b.attn.q);
                out.push(&mut b.attn.v);
            }
        }
        if targets.cross {
            for c in &mut self.cross {
                out.push(&mut c.attn.q);
                out.push(&mut c.attn.v);
            }
        }
        out
    }

    /// All linear layers that may carry an adapter.
    pub fn adapted_linears(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        for a in self.video.blocks.iter().map(|b| &b.attn).chain(self.text.blocks.iter().map(|b| &b.attn)).chain(self.cross.iter().map(|c| &c.attn)) {
            for l in [&a.q, &a.k, &a.v, &a.o] {
                if l.lora.is_some() {
                    out.push(l);
                }
            }
        }
        out
    }

    pub fn adapted_linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        let attns = self
            .video
            .blocks
            .iter_mut()
            .map(|b| &mut b.attn)
            .chain(self.text.blocks.iter_mut().map(|b| &mut b.attn))
            .chain(self.cross.iter_mut().map(|c| &mut c.attn));
        for a in attns {
            for l in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                if l.lora.is_some() {
                    out.push(l);
                }
            }
        }
        out
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }
}

/// Caption prompt ids for `vocab`.
pub fn prompt_ids(vocab: &Vocabulary, prompt: &str) -> Result<Vec<usize>> {
    let ids = vocab.encode(prompt);
    if ids.contains(&UNK) {
        bail!(Vocab, "prompt {prompt:?} contains words missing from the vocabulary");
    }
    Ok(ids)
}

/// Draw a random clip-sized frame grid (testing and smoke runs).
pub fn random_clip(cfg: &ModelConfig, frames: usize, rng: &mut impl Rng) -> FrameGrid {
    let n = frames * cfg.frame_h * cfg.frame_w * cfg.channels;
    FrameGrid::new(frames, cfg.frame_h, cfg.frame_w, cfg.channels, (0..n).map(|_| rng.gen::<f32>()).collect()).expect("dimensions are consistent")
}
