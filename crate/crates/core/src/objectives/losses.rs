use rand::Rng;

use super::masking::MaskingPlan;
use crate::error::{bail, Result};
use crate::tensor::graph::Segments;
use crate::tensor::{Graph, Real, Var};
use crate::vlm::model::Pooled;
use crate::vlm::{FrameGrid, Stage1Model};

/// One paired clip and caption (caption ids exclude any prompt).
#[derive(Clone, Debug)]
pub struct Sample {
    pub clip: FrameGrid,
    pub caption: Vec<usize>,
}

/// Prompt ids for the captioning/masking and alignment tasks.
#[derive(Clone, Debug)]
pub struct Prompts {
    pub caption: Vec<usize>,
    pub align: Vec<usize>,
}

/// Per-sample masking plans for both masked objectives.
#[derive(Clone, Debug)]
pub struct BatchPlans {
    pub mgc: Vec<MaskingPlan>,
    pub mlm: Vec<MaskingPlan>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub mgc_ratio: f64,
    pub mlm_ratio: f64,
    /// Divide the contrastive loss by the batch size.
    pub normalize_mga: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings { mgc_ratio: 0.6, mlm_ratio: 0.1, normalize_mga: true }
    }
}

/// Loss vars of one batch.
#[derive(Clone, Copy, Debug)]
pub struct ValorTerms {
    pub mga: Var,
    pub mgc: Var,
    pub mlm: Var,
    pub total: Var,
}

/// Fine-grained similarity matrix `[A, B]` between pooled text and video samples.
pub fn similarity<S: Real>(g: &Graph<'_, S>, text: &[Pooled], video: &[Pooled]) -> Result<Var> {
    if text.is_empty() || video.is_empty() {
        bail!(Input, "similarity needs at least one sample per side");
    }
    let tl: Vec<usize> = text.iter().map(|p| g.shape(p.tokens)[0]).collect();
    let vl: Vec<usize> = video.iter().map(|p| g.shape(p.tokens)[0]).collect();
    let cat = |xs: Vec<Var>| if xs.len() == 1 { Ok(xs[0]) } else { g.concat_rows(&xs) };
    let flat = |v: Var| {
        let n = g.shape(v)[0];
        g.reshape(v, &[n, 1])
    };
    let et = cat(text.iter().map(|p| p.tokens).collect())?;
    let ev = cat(video.iter().map(|p| p.tokens).collect())?;
    let wt = cat(text.iter().map(|p| flat(p.weights)).collect::<Result<_>>()?)?;
    let wv = cat(video.iter().map(|p| flat(p.weights)).collect::<Result<_>>()?)?;
    let nt = g.shape(wt)[0];
    let nv = g.shape(wv)[0];
    g.similarity_matrix(et, g.reshape(wt, &[nt])?, Segments::from_lengths(&tl), ev, g.reshape(wv, &[nv])?, Segments::from_lengths(&vl))
}

/// Bidirectional contrastive loss over a `[B, B]` similarity matrix with
/// temperature `exp(log_tau)`; summed over the batch unless `normalize`.
pub fn mga_from_similarity<S: Real>(g: &Graph<'_, S>, s: Var, log_tau: Var, normalize: bool) -> Result<Var> {
    let shape = g.shape(s);
    if shape.len() != 2 || shape[0] != shape[1] {
        bail!(Shape, "similarity matrix must be square, got {shape:?}");
    }
    let b = shape[0];
    let inv_tau = g.exp(g.scale(log_tau, -S::one())?)?;
    let z = g.mul_scalar_var(s, inv_tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let t2v = g.sum(g.pick(g.log_softmax(z)?, &diag)?)?;
    let v2t = g.sum(g.pick(g.log_softmax(g.transpose(z)?)?, &diag)?)?;
    let mut factor = -0.5;
    if normalize {
        factor /= b as f64;
    }
    g.scale(g.add(t2v, v2t)?, S::lit(factor))
}

/// Mean cross-entropy over the masked rows of several `[N_i, V]` logit matrices.
pub fn masked_cross_entropy<S: Real>(g: &Graph<'_, S>, logits: &[Var], plans: &[&MaskingPlan]) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (&l, p) in logits.iter().zip(plans) {
        if p.is_empty() {
            continue;
        }
        rows.push(g.gather_rows(l, &p.positions)?);
        targets.extend(&p.targets);
    }
    if rows.is_empty() {
        bail!(Input, "masking plans are empty");
    }
    let all = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    g.cross_entropy(all, &targets)
}

impl Stage1Model {
    /// Contrastive alignment loss of a batch given encoded video tokens.
    pub fn mga_loss<S: Real>(&self, g: &Graph<'_, S>, videos: &[Var], captions: &[Vec<usize>], prompts: &Prompts, normalize: bool) -> Result<Var> {
        if videos.is_empty() {
            bail!(Input, "empty batch");
        }
        let mut text = Vec::with_capacity(captions.len());
        let mut video = Vec::with_capacity(videos.len());
        for (v, cap) in videos.iter().zip(captions) {
            let ids: Vec<usize> = prompts.align.iter().chain(cap).copied().collect();
            text.push(self.pool_text(g, self.encode_text(g, &ids)?)?);
            video.push(self.pool_video(g, *v)?);
        }
        let s = similarity(g, &text, &video)?;
        mga_from_similarity(g, s, g.param(self.head.log_tau), normalize)
    }

    /// Masked reconstruction through the decoder; causal for captioning, bidirectional for MLM.
    pub fn masked_loss<S: Real>(&self, g: &Graph<'_, S>, videos: &[Var], plans: &[MaskingPlan], causal: bool) -> Result<Var> {
        let mut logits = Vec::with_capacity(plans.len());
        let mut used = Vec::with_capacity(plans.len());
        for (v, p) in videos.iter().zip(plans) {
            if p.is_empty() {
                continue;
            }
            logits.push(self.decode(g, &p.input_ids, *v, causal)?);
            used.push(p);
        }
        masked_cross_entropy(g, &logits, &used)
    }

    /// All three objectives and their mean for one batch.
    pub fn valor_loss<S: Real>(
        &self,
        g: &Graph<'_, S>,
        batch: &[&Sample],
        prompts: &Prompts,
        plans: &BatchPlans,
        settings: &LossSettings,
    ) -> Result<ValorTerms> {
        let videos: Vec<Var> = batch.iter().map(|s| self.encode_video(g, &s.clip)).collect::<Result<_>>()?;
        let captions: Vec<Vec<usize>> = batch.iter().map(|s| s.caption.clone()).collect();
        let mga = self.mga_loss(g, &videos, &captions, prompts, settings.normalize_mga)?;
        let mgc = self.masked_loss(g, &videos, &plans.mgc, true)?;
        let mlm = self.masked_loss(g, &videos, &plans.mlm, false)?;
        let total = g.scale(g.add(g.add(mga, mgc)?, mlm)?, S::lit(1.0 / 3.0))?;
        Ok(ValorTerms { mga, mgc, mlm, total })
    }
}

/// Fresh masking plans over the caption part of `prompt ++ caption` for every sample.
pub fn sample_plans(batch: &[&Sample], prompts: &Prompts, settings: &LossSettings, rng: &mut impl Rng) -> Result<BatchPlans> {
    let mut mgc = Vec::with_capacity(batch.len());
    let mut mlm = Vec::with_capacity(batch.len());
    for s in batch {
        let ids: Vec<usize> = prompts.caption.iter().chain(&s.caption).copied().collect();
        let flags: Vec<bool> = (0..ids.len()).map(|i| i >= prompts.caption.len() && !crate::vlm::Vocabulary::is_reserved(ids[i])).collect();
        mgc.push(MaskingPlan::sample(&ids, &flags, settings.mgc_ratio, rng)?);
        mlm.push(MaskingPlan::sample(&ids, &flags, settings.mlm_ratio, rng)?);
    }
    Ok(BatchPlans { mgc, mlm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mga_closed_forms() {
        let g = Graph::<f64>::new();
        let zero = g.input(Tensor::scalar(0.0)).unwrap();
        let s1 = g.input(Tensor::scalar(0.37).reshape(&[1, 1]).unwrap()).unwrap();
        assert_eq!(g.scalar(mga_from_similarity(&g, s1, zero, false).unwrap()), 0.0);
        let s2 = g.input(Tensor::eye(2)).unwrap();
        let l = g.scalar(mga_from_similarity(&g, s2, zero, false).unwrap());
        let want = -2.0 * (std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.62652).abs() < 1e-5);
    }

    #[test]
    fn diagonal_dominance_beats_uniform() {
        for b in [2, 4] {
            let g = Graph::<f64>::new();
            let zero = g.input(Tensor::scalar(0.0)).unwrap();
            let id = g.input(Tensor::<f64>::eye(b).map(|x| 3.0 * x)).unwrap();
            let uni = g.input(Tensor::full(&[b, b], 1.0)).unwrap();
            let a = g.scalar(mga_from_similarity(&g, id, zero, false).unwrap());
            let u = g.scalar(mga_from_similarity(&g, uni, zero, false).unwrap());
            assert!(a < u);
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(&[5, 4])).unwrap();
        let plan = MaskingPlan::at(&[0, 1, 2, 3, 0], &[1, 3]);
        let v = g.scalar(masked_cross_entropy(&g, &[l], &[&plan]).unwrap());
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_similarity() {
        let g = Graph::<f64>::new();
        // two text tokens with dots 0.2 and 0.8 against one video token
        let et = g.input(Tensor::new(&[2, 1], vec![0.2, 0.8]).unwrap()).unwrap();
        let ev = g.input(Tensor::new(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let wt = g.input(Tensor::new(&[2], vec![0.5, 0.5]).unwrap()).unwrap();
        let wv = g.input(Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        let s = similarity(&g, &[Pooled { tokens: et, weights: wt }], &[Pooled { tokens: ev, weights: wv }]).unwrap();
        assert!((g.scalar(s) - 0.65).abs() < 1e-12);
    }
}
