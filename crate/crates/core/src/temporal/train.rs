use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::model::TemporalModel;
use crate::error::{bail, Result};
use crate::tensor::optim::{clip_global_norm, AdamW, CosineSchedule};
use crate::tensor::{Graph, ParamStore, Tensor};

/// One training video: clip features and per-clip phase labels.
#[derive(Clone, Debug)]
pub struct TemporalSample {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalTrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// One epoch when unset.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TemporalTrainConfig {
    fn default() -> Self {
        TemporalTrainConfig { epochs: 150, lr_max: 1e-3, lr_min: 1e-7, warmup_steps: None, weight_decay: 0.01, clip_norm: 5.0, seed: 0 }
    }
}

/// Train on one whole video per step; returns the mean loss of every epoch.
pub fn train_temporal(model: &TemporalModel, store: &mut ParamStore<f32>, videos: &[TemporalSample], cfg: &TemporalTrainConfig) -> Result<Vec<f64>> {
    if videos.is_empty() {
        bail!(Config, "no training videos");
    }
    if cfg.epochs == 0 || !(cfg.lr_max > 0.0) || cfg.lr_min > cfg.lr_max {
        bail!(Config, "invalid temporal training settings");
    }
    for (i, v) in videos.iter().enumerate() {
        if v.features.rank() != 2 || v.features.shape()[0] != v.labels.len() {
            bail!(Input, "video {i}: {} label positions for features of shape {:?}", v.labels.len(), v.features.shape());
        }
    }
    let total_steps = cfg.epochs * videos.len();
    let schedule = CosineSchedule {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        warmup_steps: cfg.warmup_steps.unwrap_or(videos.len()).min(total_steps),
        total_steps,
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let v = &videos[i];
            let (loss, mut grads) = {
                let g = Graph::with_params(&*store);
                let x = g.input(v.features.clone())?;
                let outs = model.forward(&g, x)?;
                let l = model.loss(&g, &outs, &v.labels)?;
                (g.scalar(l) as f64, g.backward(l)?.into_param_grads())
            };
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(store, &grads, schedule.lr(step));
            sum += loss;
            step += 1;
        }
        let mean = sum / videos.len() as f64;
        log::debug!("stage2 epoch {epoch} loss {mean:.4}");
        history.push(mean);
    }
    Ok(history)
}
