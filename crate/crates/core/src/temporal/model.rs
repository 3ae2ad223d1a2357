use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::asformer::AsFormer;
use super::loss::{asformer_loss, tcn_loss};
use super::mstcn::MsTcn;
use crate::error::{bail, Result};
use crate::tensor::{checkpoint, Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tcn,
    Asformer,
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tcn" | "mstcn" | "ms-tcn" => Ok(Variant::Tcn),
            "asformer" | "asf" => Ok(Variant::Asformer),
            _ => bail!(Config, "unknown temporal model {s:?} (expected tcn or asformer)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub variant: Variant,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    /// Prediction stage plus refinement stages.
    pub tcn_stages: usize,
    /// Largest dilated kernel span; fixes the dilation ladder.
    pub max_kernel: usize,
    pub tmse_weight: f64,
    pub tmse_clamp: f64,
    pub enc_layers: usize,
    pub decoders: usize,
    pub dec_layers: usize,
    /// Label names in class-id order; empty means `class_<i>`.
    pub class_names: Vec<String>,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            variant: Variant::Tcn,
            feature_dim: 64,
            num_classes: 6,
            hidden: 64,
            tcn_stages: 4,
            max_kernel: 25,
            tmse_weight: 0.15,
            tmse_clamp: 16.0,
            enc_layers: 9,
            decoders: 3,
            dec_layers: 9,
            class_names: Vec::new(),
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.num_classes < 2 {
            bail!(Config, "temporal model needs positive widths and at least two classes");
        }
        if self.tcn_stages == 0 || self.enc_layers == 0 || self.max_kernel < 3 {
            bail!(Config, "temporal model needs at least one stage/layer and max_kernel >= 3");
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            bail!(Config, "{} class names for {} classes", self.class_names.len(), self.num_classes);
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            (0..self.num_classes).map(|i| format!("class_{i}")).collect()
        } else {
            self.class_names.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub enum Net {
    Tcn(MsTcn),
    Asformer(AsFormer),
}

#[derive(Clone, Debug)]
pub struct TemporalModel {
    pub cfg: TemporalConfig,
    pub net: Net,
}

/// Per-position logits and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub logits: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl FramePrediction {
    pub fn from_logits(logits: Tensor<f32>) -> Self {
        let (l, k) = logits.dims2();
        let labels = (0..l)
            .map(|i| {
                let row = &logits.data()[i * k..(i + 1) * k];
                (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect();
        FramePrediction { logits, labels }
    }
}

impl TemporalModel {
    pub fn build<S: Real>(cfg: &TemporalConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let net = match cfg.variant {
            Variant::Tcn => Net::Tcn(MsTcn::build(store, cfg.feature_dim, cfg.hidden, cfg.num_classes, cfg.tcn_stages, cfg.max_kernel, &mut rng)?),
            Variant::Asformer => Net::Asformer(AsFormer::build(
                store,
                cfg.feature_dim,
                cfg.hidden,
                cfg.num_classes,
                cfg.enc_layers,
                cfg.decoders,
                cfg.dec_layers,
                &mut rng,
            )?),
        };
        Ok(TemporalModel { cfg: cfg.clone(), net })
    }

    pub fn init(cfg: &TemporalConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let m = Self::build(cfg, &mut store, seed)?;
        Ok((m, store))
    }

    /// Logits of every stage/output for features `[L, D]`, last one final.
    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<Vec<Var>> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.cfg.feature_dim {
            bail!(Shape, "features must be [L >= 1, {}], got {shape:?}", self.cfg.feature_dim);
        }
        match &self.net {
            Net::Tcn(m) => m.forward(g, x),
            Net::Asformer(m) => m.forward(g, x),
        }
    }

    pub fn loss<S: Real>(&self, g: &Graph<'_, S>, outputs: &[Var], labels: &[usize]) -> Result<Var> {
        match self.cfg.variant {
            Variant::Tcn => tcn_loss(g, outputs, labels, self.cfg.tmse_weight, self.cfg.tmse_clamp),
            Variant::Asformer => asformer_loss(g, outputs, labels),
        }
    }

    pub fn predict(&self, store: &ParamStore<f32>, features: &Tensor<f32>) -> Result<Vec<FramePrediction>> {
        let g = Graph::inference(store);
        let x = g.input(features.clone())?;
        Ok(self.forward(&g, x)?.into_iter().map(|v| FramePrediction::from_logits(g.to_tensor(v))).collect())
    }

    /// Weights to `path` (WLCP) and the config to `path` with a `.json` extension.
    pub fn save(&self, store: &ParamStore<f32>, path: &Path) -> Result<()> {
        checkpoint::save_store(store, path, |_| true)?;
        fs::write(config_path(path), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore<f32>)> {
        let cfg: TemporalConfig = serde_json::from_str(&fs::read_to_string(config_path(path))?)?;
        let (m, mut store) = Self::init(&cfg, 0)?;
        checkpoint::load_into(&mut store, path)?;
        Ok((m, store))
    }
}

pub fn config_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}
