//! Low-rank adapters on attention query/value projections.
//!
//! An adapter adds `(alpha / r) · x Aᵀ Bᵀ` to a linear layer whose weight is
//! stored as `[d_in, d_out]`, with `A: [r, d_in]` and `B: [d_out, r]`.
//! Adapter parameters are named `lora.<layer>.a` / `lora.<layer>.b`.

use std::path::Path;

use rand::Rng;

use crate::error::{bail, Result};
use crate::objectives::{train_stage1, CurveRow, Prompts, Sample, TrainConfig};
use crate::tensor::kernels::gemm_tn;
use crate::tensor::{checkpoint, ParamId, ParamStore, Real, Tensor};
use crate::vlm::model::{LoraTargets, Stage1Model};

pub const PREFIX: &str = "lora.";

const A_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub enabled: bool,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn is_adapter(name: &str) -> bool {
    name.starts_with(PREFIX)
}

/// Add adapters to the selected q/v projections and freeze every base parameter.
/// `alpha = None` uses `alpha = rank`. Returns the number of adapter parameters.
pub fn attach<S: Real>(
    model: &mut Stage1Model,
    store: &mut ParamStore<S>,
    rank: usize,
    alpha: Option<f64>,
    targets: LoraTargets,
    rng: &mut impl Rng,
) -> Result<usize> {
    if rank == 0 {
        bail!(Config, "LoRA rank must be at least 1");
    }
    if model.merged {
        bail!(State, "adapters were already merged into this model");
    }
    if !model.adapted_linears().is_empty() {
        bail!(State, "model already has adapters attached");
    }
    let layers = model.lora_targets_mut(targets);
    if layers.is_empty() {
        bail!(Config, "no attention layers selected for adapters");
    }
    if let Some(l) = layers.iter().find(|l| rank > l.d_in.min(l.d_out)) {
        bail!(Config, "rank {rank} exceeds min(d_in, d_out) = {}", l.d_in.min(l.d_out));
    }
    let alpha = alpha.unwrap_or(rank as f64);
    let mut added = 0;
    for l in layers {
        let base = store.name(l.w).trim_end_matches(".w").to_string();
        let a = store.add_normal(format!("{PREFIX}{base}.a"), &[rank, l.d_in], A_INIT_STD, rng)?;
        let b = store.add_zeros(format!("{PREFIX}{base}.b"), &[l.d_out, rank])?;
        added += rank * (l.d_in + l.d_out);
        l.lora = Some(LoraAdapter { a, b, rank, alpha, enabled: true });
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.set_trainable(id, is_adapter(store.name(id)));
    }
    Ok(added)
}

pub fn set_enabled(model: &mut Stage1Model, enabled: bool) {
    for l in model.adapted_linears_mut() {
        if let Some(ad) = l.lora.as_mut() {
            ad.enabled = enabled;
        }
    }
}

/// Number of adapter parameters currently attached.
pub fn adapter_count(model: &Stage1Model) -> usize {
    model.adapted_linears().iter().filter_map(|l| l.lora.as_ref().map(|ad| ad.rank * (l.d_in + l.d_out))).sum()
}

/// Fold enabled adapters into the base weights: `W += (alpha / r) · Aᵀ Bᵀ`.
/// Adapters are detached afterwards; merging again is a state error.
pub fn merge<S: Real>(model: &mut Stage1Model, store: &mut ParamStore<S>) -> Result<()> {
    if model.merged {
        bail!(State, "adapters already merged");
    }
    let layers = model.adapted_linears_mut();
    if layers.is_empty() {
        bail!(State, "no adapters to merge");
    }
    if layers.iter().any(|l| !l.lora.as_ref().is_some_and(|a| a.enabled)) {
        bail!(State, "adapters must be enabled to merge");
    }
    for l in layers {
        let ad = l.lora.take().expect("checked above");
        let a = store.get(ad.a).clone();
        let b = store.get(ad.b).clone();
        let bt = transpose(&b);
        // Aᵀ [d_in, r] · Bᵀ [r, d_out]
        let mut delta = vec![S::zero(); l.d_in * l.d_out];
        gemm_tn(a.data(), bt.data(), &mut delta, ad.rank, l.d_in, l.d_out);
        let s = S::lit(ad.scale());
        let w = store.data_mut(l.w);
        for (wi, di) in w.iter_mut().zip(&delta) {
            *wi += s * *di;
        }
    }
    model.merged = true;
    Ok(())
}

fn transpose<S: Real>(t: &Tensor<S>) -> Tensor<S> {
    let (r, c) = t.dims2();
    Tensor::from_fn(&[c, r], |k| t.at2(k % r, k / r))
}

/// Digest of all non-adapter parameters.
pub fn base_digest<S: Real>(store: &ParamStore<S>) -> String {
    store.digest(|n| !is_adapter(n))
}

pub fn save_adapters<S: Real>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    if !store.iter().any(|(_, n, _)| is_adapter(n)) {
        bail!(State, "store has no adapter parameters");
    }
    checkpoint::save_store(store, path, is_adapter)
}

/// Load adapter weights into an adapted model's store.
pub fn load_adapters<S: Real>(store: &mut ParamStore<S>, path: &Path) -> Result<usize> {
    let entries = checkpoint::load(path)?;
    if let Some((n, _)) = entries.iter().find(|(n, _)| !is_adapter(n)) {
        bail!(Format, "adapter checkpoint contains non-adapter entry {n}");
    }
    checkpoint::load_into(store, path)
}

/// Train only the adapters on `samples`; fails if the base weights change.
pub fn finetune_lora(
    model: &Stage1Model,
    store: &mut ParamStore<f32>,
    samples: &[Sample],
    prompts: &Prompts,
    cfg: &TrainConfig,
) -> Result<Vec<CurveRow>> {
    if adapter_count(model) == 0 {
        bail!(State, "no adapters attached");
    }
    if store.iter().any(|(id, n, _)| store.is_trainable(id) != is_adapter(n)) {
        bail!(State, "base parameters must be frozen before adapter training");
    }
    let before = base_digest(store);
    let curve = train_stage1(model, store, samples, prompts, cfg)?;
    if base_digest(store) != before {
        bail!(State, "base weights changed during adapter training");
    }
    Ok(curve)
}
