//! Transformer building blocks. Each layer holds parameter ids only; values
//! live in a [`ParamStore`] so the same layout serves training, inference and
//! 64-bit gradient checks.

use rand::Rng;

use crate::error::Result;
use crate::lora::LoraAdapter;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

/// `y = x W + b` with `W` stored as `[d_in, d_out]`, plus an optional low-rank adapter.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], std, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[d_out])?;
        Ok(Linear { w, b, d_in, d_out, lora: None })
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        let y = g.add_row(g.matmul(x, g.param(self.w))?, g.param(self.b))?;
        match &self.lora {
            Some(ad) if ad.enabled => {
                let xa = g.matmul_nt(x, g.param(ad.a))?;
                let delta = g.matmul_nt(xa, g.param(ad.b))?;
                g.add(y, g.scale(delta, S::lit(ad.scale()))?)
            }
            _ => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm { gamma: store.add_ones(format!("{name}.gamma"), &[dim])?, beta: store.add_zeros(format!("{name}.beta"), &[dim])? })
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta), 1e-5)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// Queries of width `d_q`, keys/values read from inputs of width `d_kv`.
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d_q: usize, d_kv: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d_q, d_q, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_kv, d_q, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_kv, d_q, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d_q, d_q, rng)?,
            heads,
        })
    }

    /// `mask` is added to the `[N_q, N_kv]` score matrix of every head.
    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, xq: Var, xkv: Var, mask: Option<Var>) -> Result<Var> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let d = self.q.d_out;
        let dh = d / self.heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) =
                if self.heads == 1 { (q, k, v) } else { (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?) };
            let mut scores = g.scale(g.matmul_nt(qh, kh)?, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let att = g.softmax(scores)?;
            outs.push(g.matmul(att, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        let h = g.gelu(self.fc1.forward(g, x)?)?;
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng)?,
        })
    }

    pub fn self_attend<S: Real>(&self, g: &Graph<'_, S>, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        g.add(x, self.attn.forward(g, h, h, mask)?)
    }

    pub fn feed_forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        let h = self.ln2.forward(g, x)?;
        g.add(x, self.ffn.forward(g, h)?)
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var, mask: Option<Var>) -> Result<Var> {
        let x = self.self_attend(g, x, mask)?;
        self.feed_forward(g, x)
    }
}

/// Additive mask hiding future positions.
pub fn causal_mask<S: Real>(n: usize) -> Tensor<S> {
    Tensor::from_fn(&[n, n], |k| if k % n > k / n { S::lit(-1e9) } else { S::zero() })
}
