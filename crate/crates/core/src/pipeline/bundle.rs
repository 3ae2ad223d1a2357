use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::lora;
use crate::objectives::Prompts;
use crate::tensor::{checkpoint, ParamStore};
use crate::vlm::model::{prompt_ids, ALIGN_PROMPT, CAPTION_PROMPT};
use crate::vlm::{LoraTargets, ModelConfig, Stage1Model, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LoraSidecar {
    rank: usize,
    alpha: f64,
    targets: LoraTargets,
    enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    vocab: Vec<String>,
    lora: Option<LoraSidecar>,
}

/// A stage-1 model with its weights and vocabulary.
#[derive(Clone, Debug)]
pub struct Stage1Bundle {
    pub model: Stage1Model,
    pub store: ParamStore<f32>,
    pub vocab: Vocabulary,
    /// Targets of the attached adapters, if any.
    pub lora_targets: Option<LoraTargets>,
}

/// Sidecar path of a checkpoint: same stem, `.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl Stage1Bundle {
    /// Fresh model sized to `vocab`.
    pub fn init(cfg: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let cfg = ModelConfig { vocab_size: vocab.len(), ..cfg.clone() };
        let (model, store) = Stage1Model::init(&cfg, seed)?;
        Ok(Stage1Bundle { model, store, vocab, lora_targets: None })
    }

    pub fn prompts(&self) -> Result<Prompts> {
        Ok(Prompts { caption: prompt_ids(&self.vocab, CAPTION_PROMPT)?, align: prompt_ids(&self.vocab, ALIGN_PROMPT)? })
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: Option<f64>, targets: LoraTargets, seed: u64) -> Result<usize> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let n = lora::attach(&mut self.model, &mut self.store, rank, alpha, targets, &mut rng)?;
        self.lora_targets = Some(targets);
        Ok(n)
    }

    /// WLCP weights at `path` plus a JSON sidecar with config, vocabulary and adapter layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let lora = self.model.adapted_linears().first().and_then(|l| l.lora.as_ref()).map(|a| LoraSidecar {
            rank: a.rank,
            alpha: a.alpha,
            targets: self.lora_targets.unwrap_or_default(),
            enabled: a.enabled,
        });
        let keep_adapters = lora.is_some();
        let side = Sidecar { config: self.model.cfg.clone(), vocab: self.vocab.tokens().to_vec(), lora };
        checkpoint::save_store(&self.store, path, |n| keep_adapters || !n.starts_with(lora::PREFIX))?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let vocab = Vocabulary::from_tokens(side.vocab)?;
        if vocab.len() != side.config.vocab_size {
            bail!(Format, "sidecar vocabulary has {} tokens, config expects {}", vocab.len(), side.config.vocab_size);
        }
        let mut b = Stage1Bundle::init(&side.config, vocab, 0)?;
        if let Some(l) = &side.lora {
            b.attach_lora(l.rank, Some(l.alpha), l.targets, 0)?;
        }
        let loaded = checkpoint::load_into(&mut b.store, path)?;
        if loaded != b.store.len() {
            bail!(Format, "checkpoint holds {loaded} of {} parameters", b.store.len());
        }
        if let Some(l) = &side.lora {
            lora::set_enabled(&mut b.model, l.enabled);
        }
        Ok(b)
    }
}
