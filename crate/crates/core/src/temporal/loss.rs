use crate::error::{bail, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

const DICE_EPS: f64 = 1e-6;

fn check_labels<S: Real>(g: &Graph<'_, S>, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        bail!(Input, "{} labels for logits of shape {shape:?}", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        bail!(Index, "label {bad} out of range for {} classes", shape[1]);
    }
    Ok((shape[0], shape[1]))
}

/// Soft dice over `[L, K]` probabilities, averaged over the classes present in `labels`.
pub fn soft_dice<S: Real>(g: &Graph<'_, S>, probs: Var, labels: &[usize]) -> Result<Var> {
    let (l, k) = check_labels(g, probs, labels)?;
    let onehot = Tensor::from_fn(&[l, k], |i| if labels[i / k] == i % k { S::one() } else { S::zero() });
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&c| counts[c] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count();
    let y_sum = Tensor::from_fn(&[k], |c| S::lit(counts[c] as f64));
    let weight = Tensor::from_fn(&[k], |c| if counts[c] > 0 { S::lit(1.0 / present as f64) } else { S::zero() });

    let inter = g.sum_rows(g.mul(probs, g.input(onehot)?)?)?;
    let num = g.add_scalar(g.scale(inter, S::lit(2.0))?, S::lit(DICE_EPS))?;
    let den = g.add_scalar(g.add(g.sum_rows(probs)?, g.input(y_sum)?)?, S::lit(DICE_EPS))?;
    let score = g.sum(g.mul(g.div(num, den)?, g.input(weight)?)?)?;
    g.add_scalar(g.scale(score, -S::one())?, S::one())
}

/// Mean over positions and classes of `min((log p_t - log p_{t-1})^2, clamp)`.
/// Zero for single-position sequences.
pub fn truncated_mse<S: Real>(g: &Graph<'_, S>, logits: Var, clamp: f64) -> Result<Var> {
    let n = g.shape(logits)[0];
    if n < 2 {
        return g.input(Tensor::scalar(S::zero()));
    }
    let ls = g.log_softmax(logits)?;
    let cur = g.slice_rows(ls, 1, n - 1)?;
    let prev = g.slice_rows(ls, 0, n - 1)?;
    let d = g.sub(cur, prev)?;
    g.mean(g.clamp_max(g.mul(d, d)?, S::lit(clamp))?)
}

/// Sum over stages of frame-wise cross-entropy plus `weight` times the smoothing term.
pub fn tcn_loss<S: Real>(g: &Graph<'_, S>, outputs: &[Var], labels: &[usize], weight: f64, clamp: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &o in outputs {
        check_labels(g, o, labels)?;
        let mut term = g.cross_entropy(o, labels)?;
        if weight != 0.0 {
            term = g.add(term, g.scale(truncated_mse(g, o, clamp)?, S::lit(weight))?)?;
        }
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => bail!(Input, "no stage outputs"),
    }
}

/// Sum over outputs of `CE / 2 + dice / 2`.
pub fn asformer_loss<S: Real>(g: &Graph<'_, S>, outputs: &[Var], labels: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &o in outputs {
        check_labels(g, o, labels)?;
        let ce = g.cross_entropy(o, labels)?;
        let dice = soft_dice(g, g.softmax(o)?, labels)?;
        let term = g.scale(g.add(ce, dice)?, S::lit(0.5))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => bail!(Input, "no stage outputs"),
    }
}
