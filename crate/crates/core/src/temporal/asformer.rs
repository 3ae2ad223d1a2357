use rand::Rng;

use super::conv::DilatedConv;
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::vlm::layers::{LayerNorm, Linear};

/// Single-head attention restricted to `|i - j| < window`, with queries and
/// keys from one input and values from another.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub window: usize,
}

impl WindowAttention {
    fn new<S: Real>(store: &mut ParamStore<S>, name: &str, hidden: usize, window: usize, rng: &mut impl Rng) -> Result<Self> {
        let inner = (hidden / 2).max(1);
        Ok(WindowAttention {
            q: Linear::new(store, &format!("{name}.q"), hidden, inner, rng)?,
            k: Linear::new(store, &format!("{name}.k"), hidden, inner, rng)?,
            v: Linear::new(store, &format!("{name}.v"), hidden, inner, rng)?,
            out: Linear::new(store, &format!("{name}.out"), inner, hidden, rng)?,
            window,
        })
    }

    fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var, values: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let w = self.window.min(n);
        let band = Tensor::from_fn(&[n, n], |k| if (k / n).abs_diff(k % n) < w { S::zero() } else { S::lit(-1e9) });
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, values)?;
        let scale = S::lit(1.0 / (self.q.d_out as f64).sqrt());
        let scores = g.add(g.scale(g.matmul_nt(q, k)?, scale)?, g.input(band)?)?;
        let att = g.matmul(g.softmax(scores)?, v)?;
        self.out.forward(g, g.relu(att)?)
    }
}

/// Dilated feed-forward conv, normalised windowed attention and a 1×1 mix,
/// all inside a residual connection.
#[derive(Clone, Debug)]
pub struct AsfLayer {
    pub ff: DilatedConv,
    pub norm: LayerNorm,
    pub att: WindowAttention,
    pub mix: Linear,
}

impl AsfLayer {
    fn new<S: Real>(store: &mut ParamStore<S>, name: &str, hidden: usize, i: usize, rng: &mut impl Rng) -> Result<Self> {
        let reach = 1usize << i.min(30);
        Ok(AsfLayer {
            ff: DilatedConv::new(store, &format!("{name}.ff"), 3, hidden, hidden, reach, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden)?,
            att: WindowAttention::new(store, &format!("{name}.att"), hidden, reach, rng)?,
            mix: Linear::new(store, &format!("{name}.mix"), hidden, hidden, rng)?,
        })
    }

    /// `values = None` attends over the layer's own features.
    fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var, values: Option<Var>, alpha: f64) -> Result<Var> {
        let f = g.relu(self.ff.forward(g, x)?)?;
        let n = self.norm.forward(g, f)?;
        let a = self.att.forward(g, n, values.unwrap_or(n))?;
        let out = g.add(g.scale(a, S::lit(alpha))?, f)?;
        g.add(x, self.mix.forward(g, out)?)
    }
}

#[derive(Clone, Debug)]
pub struct AsfBlock {
    pub input: Linear,
    pub layers: Vec<AsfLayer>,
    pub output: Linear,
    pub alpha: f64,
}

impl AsfBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        hidden: usize,
        classes: usize,
        layers: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(AsfBlock {
            input: Linear::new(store, &format!("{name}.in"), d_in, hidden, rng)?,
            layers: (0..layers).map(|i| AsfLayer::new(store, &format!("{name}.{i}"), hidden, i, rng)).collect::<Result<_>>()?,
            output: Linear::new(store, &format!("{name}.out"), hidden, classes, rng)?,
            alpha,
        })
    }

    /// Returns `(logits, features)`.
    fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var, values: Option<Var>) -> Result<(Var, Var)> {
        let mut h = self.input.forward(g, x)?;
        for l in &self.layers {
            h = l.forward(g, h, values, self.alpha)?;
        }
        Ok((self.output.forward(g, h)?, h))
    }
}

/// Transformer encoder-decoder for segmentation. Window and dilation double
/// per layer; each decoder refines the previous probabilities with values
/// taken from the preceding block's features, its attention branch damped by
/// `exp(-3 s)` for decoder `s`.
#[derive(Clone, Debug)]
pub struct AsFormer {
    pub encoder: AsfBlock,
    pub decoders: Vec<AsfBlock>,
}

impl AsFormer {
    #[allow(clippy::too_many_arguments)]
    pub fn build<S: Real>(
        store: &mut ParamStore<S>,
        d_in: usize,
        hidden: usize,
        classes: usize,
        enc_layers: usize,
        decoders: usize,
        dec_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder = AsfBlock::new(store, "asf.enc", d_in, hidden, classes, enc_layers, 1.0, rng)?;
        let decoders = (0..decoders)
            .map(|s| AsfBlock::new(store, &format!("asf.dec{s}"), classes, hidden, classes, dec_layers, (-3.0 * s as f64).exp(), rng))
            .collect::<Result<_>>()?;
        Ok(AsFormer { encoder, decoders })
    }

    /// Encoder logits followed by each decoder's logits.
    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<Vec<Var>> {
        let (mut logits, mut feat) = self.encoder.forward(g, x, None)?;
        let mut outs = vec![logits];
        for d in &self.decoders {
            let (l, f) = d.forward(g, g.softmax(logits)?, Some(feat))?;
            logits = l;
            feat = f;
            outs.push(l);
        }
        Ok(outs)
    }
}
