//! Finite-difference checks of every training loss on tiny models.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::Result;
use crate::objectives::{sample_plans, BatchPlans, LossSettings, Prompts, Sample};
use crate::temporal::{TemporalConfig, TemporalModel, Variant};
use crate::tensor::gradcheck::{grad_check_sampled, GradReport, Objective, Precision};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::vlm::model::random_clip;
use crate::vlm::{ModelConfig, Stage1Model};

pub const EPS: f64 = 1e-6;
const PER_PARAM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Mga,
    Mgc,
    Mlm,
    Valor,
}

/// Stage-1 losses over a fixed batch and fixed masking plans.
pub struct Stage1Case {
    pub model: Stage1Model,
    pub batch: Vec<Sample>,
    pub prompts: Prompts,
    pub plans: BatchPlans,
    pub settings: LossSettings,
    pub term: Term,
}

impl Objective for Stage1Case {
    fn eval<S: Real>(&self, g: &Graph<'_, S>) -> Result<Var> {
        let batch: Vec<&Sample> = self.batch.iter().collect();
        if self.term == Term::Mga {
            let videos: Vec<Var> = batch.iter().map(|s| self.model.encode_video(g, &s.clip)).collect::<Result<_>>()?;
            let caps: Vec<Vec<usize>> = batch.iter().map(|s| s.caption.clone()).collect();
            return self.model.mga_loss(g, &videos, &caps, &self.prompts, self.settings.normalize_mga);
        }
        let t = self.model.valor_loss(g, &batch, &self.prompts, &self.plans, &self.settings)?;
        Ok(match self.term {
            Term::Mgc => t.mgc,
            Term::Mlm => t.mlm,
            _ => t.total,
        })
    }
}

/// Stage-2 loss of one model on one labelled sequence.
pub struct Stage2Case {
    pub model: TemporalModel,
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Objective for Stage2Case {
    fn eval<S: Real>(&self, g: &Graph<'_, S>) -> Result<Var> {
        let x = g.input(self.features.cast())?;
        let outs = self.model.forward(g, x)?;
        self.model.loss(g, &outs, &self.labels)
    }
}

/// Move every parameter off its initial value so zero-initialised biases do
/// not place ReLUs exactly on their kink.
fn jitter(store: &mut ParamStore<f64>, rng: &mut impl Rng) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        let moved = Tensor::from_fn(t.shape(), |k| t.data()[k] + rng.gen_range(-0.05..0.05));
        store.set(id, moved)?;
    }
    Ok(())
}

/// Stage-1 config with every width at most 8.
pub fn tiny_stage1_config() -> ModelConfig {
    ModelConfig {
        frame_h: 8,
        frame_w: 8,
        patch: 4,
        n_frames: 2,
        c_v: 8,
        c_t: 8,
        video_layers: 1,
        text_layers: 1,
        heads: 2,
        ffn_dim: 8,
        vocab_size: 16,
        max_text_len: 8,
        embed_dim: 4,
        feature_dim: 4,
        ..ModelConfig::default()
    }
}

pub fn stage1_case(term: Term, batch_size: usize, seed: u64) -> Result<(Stage1Case, ParamStore<f64>)> {
    let cfg = tiny_stage1_config();
    let mut store = ParamStore::new();
    let model = Stage1Model::build(&cfg, &mut store, seed)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed);
    jitter(&mut store, &mut rng)?;
    let batch: Vec<Sample> = (0..batch_size)
        .map(|_| {
            let frames = rng.gen_range(1..4);
            let len = rng.gen_range(3..=4);
            Sample { clip: random_clip(&cfg, frames, &mut rng), caption: (0..len).map(|_| rng.gen_range(8..16)).collect() }
        })
        .collect();
    let prompts = Prompts { caption: vec![5, 6], align: vec![7] };
    let settings = LossSettings::default();
    let refs: Vec<&Sample> = batch.iter().collect();
    let plans = sample_plans(&refs, &prompts, &settings, &mut rng)?;
    Ok((Stage1Case { model, batch, prompts, plans, settings, term }, store))
}

pub fn stage2_case(variant: Variant, len: usize, classes: usize, seed: u64) -> Result<(Stage2Case, ParamStore<f64>)> {
    let cfg = TemporalConfig {
        variant,
        feature_dim: 4,
        num_classes: classes,
        hidden: 4,
        tcn_stages: 4,
        max_kernel: 9,
        enc_layers: 3,
        decoders: 3,
        dec_layers: 3,
        ..TemporalConfig::default()
    };
    let mut store = ParamStore::new();
    let model = TemporalModel::build(&cfg, &mut store, seed)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0xfeed);
    jitter(&mut store, &mut rng)?;
    let features = Tensor::from_fn(&[len, 4], |_| rng.gen_range(-1.0..1.0));
    let labels = (0..len).map(|_| rng.gen_range(0..classes)).collect();
    Ok((Stage2Case { model, features, labels }, store))
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub precision: Precision,
    pub report: GradReport,
}

impl SuiteResult {
    pub fn passes(&self) -> bool {
        self.report.passes(self.precision)
    }
}

/// Check MGA (B=3), MGC, MLM, the combined loss, the ASFormer CE+dice loss
/// and the TCN loss at the given precision.
pub fn run(precision: Precision, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (name, term) in [("mga_loss", Term::Mga), ("mgc_loss", Term::Mgc), ("mlm_loss", Term::Mlm), ("valor_loss", Term::Valor)] {
        let (case, store) = stage1_case(term, 3, seed)?;
        let report = grad_check_sampled(&case, &store, EPS, precision, PER_PARAM)?;
        out.push(SuiteResult { name, precision, report });
    }
    for (name, variant) in [("stage2_ce_dice", Variant::Asformer), ("tcn_loss", Variant::Tcn)] {
        let (case, store) = stage2_case(variant, 8, 3, seed)?;
        let report = grad_check_sampled(&case, &store, EPS, precision, PER_PARAM)?;
        out.push(SuiteResult { name, precision, report });
    }
    Ok(out)
}
