use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::losses::{sample_plans, LossSettings, Prompts, Sample};
use crate::error::{bail, Result};
use crate::tensor::optim::{clip_global_norm, AdamW, CosineSchedule};
use crate::tensor::{Graph, ParamStore};
use crate::vlm::Stage1Model;

/// Stage-1 optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Linear warmup length; one epoch when unset.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mgc_ratio: f64,
    pub mlm_ratio: f64,
    pub normalize_mga: bool,
    pub seed: u64,
    /// Stop early after this many optimiser steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 8,
            lr_max: 1e-3,
            lr_min: 1e-6,
            warmup_steps: None,
            weight_decay: 0.01,
            clip_norm: 5.0,
            mgc_ratio: 0.6,
            mlm_ratio: 0.1,
            normalize_mga: true,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Adapter fine-tuning defaults: learning rate annealed from 1e-2 to 1e-4.
    pub fn lora() -> Self {
        TrainConfig { lr_max: 1e-2, lr_min: 1e-4, ..Self::default() }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings { mgc_ratio: self.mgc_ratio, mlm_ratio: self.mlm_ratio, normalize_mga: self.normalize_mga }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Config, "epochs and batch size must be positive");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            bail!(Config, "learning rates must satisfy 0 <= lr_min <= lr_max, lr_max > 0");
        }
        if !(self.clip_norm > 0.0) {
            bail!(Config, "clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub lr: f64,
    pub mga: f64,
    pub mgc: f64,
    pub mlm: f64,
    pub total: f64,
}

/// Optimise the trainable parameters of `store` on the combined objective.
pub fn train_stage1(
    model: &Stage1Model,
    store: &mut ParamStore<f32>,
    samples: &[Sample],
    prompts: &Prompts,
    cfg: &TrainConfig,
) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    if samples.is_empty() {
        bail!(Config, "training manifest is empty");
    }
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs * steps_per_epoch;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let schedule = CosineSchedule {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        warmup_steps: cfg.warmup_steps.unwrap_or(steps_per_epoch).min(total_steps),
        total_steps,
    };
    let settings = cfg.loss_settings();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(total_steps);
    'outer: for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step = curve.len();
            if step >= total_steps {
                break 'outer;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let plans = sample_plans(&batch, prompts, &settings, &mut rng)?;
            let lr = schedule.lr(step);
            let (row, mut grads) = {
                let g = Graph::with_params(&*store);
                let t = model.valor_loss(&g, &batch, prompts, &plans, &settings)?;
                let row = CurveRow {
                    step,
                    lr,
                    mga: g.scalar(t.mga) as f64,
                    mgc: g.scalar(t.mgc) as f64,
                    mlm: g.scalar(t.mlm) as f64,
                    total: g.scalar(t.total) as f64,
                };
                (row, g.backward(t.total)?.into_param_grads())
            };
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(store, &grads, lr);
            log::debug!("stage1 step {step} lr {lr:.3e} loss {:.4}", row.total);
            curve.push(row);
        }
    }
    Ok(curve)
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("step,lr,L_MGA,L_MGC,L_MLM,L_total\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{},{},{},{}", r.step, r.lr, r.mga, r.mgc, r.mlm, r.total);
    }
    s
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    fs::write(path, curve_csv(rows))?;
    Ok(())
}
