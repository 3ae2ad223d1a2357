use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticSpec;
use crate::error::{bail, Result};
use crate::objectives::TrainConfig;
use crate::temporal::{TemporalConfig, TemporalTrainConfig};
use crate::vlm::{LoraTargets, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub videos: usize,
    /// The last `test_videos` videos of a corpus are held out.
    pub test_videos: usize,
    /// Pretraining clips drawn per training video; all when unset.
    pub clips_per_video: Option<usize>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { videos: 40, test_videos: 10, clips_per_video: Some(20) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: Option<f64>,
    pub targets: LoraTargets,
    pub train: TrainConfig,
}

impl Default for LoraSection {
    fn default() -> Self {
        LoraSection { rank: 8, alpha: None, targets: LoraTargets::default(), train: TrainConfig::lora() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub clip_s: f64,
    pub idle_label: String,
    /// Evaluation frame rate.
    pub eval_fps: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection { clip_s: 1.0, idle_label: "idle".into(), eval_fps: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub stage1: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

/// Settings of a reproducible run. Sub-section seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub synth: SyntheticSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub lora: LoraSection,
    #[serde(default)]
    pub temporal: TemporalConfig,
    #[serde(default)]
    pub temporal_train: TemporalTrainConfig,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            paths: PathsSection::default(),
            corpus: CorpusSection::default(),
            synth: SyntheticSpec::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            lora: LoraSection::default(),
            temporal: TemporalConfig::default(),
            temporal_train: TemporalTrainConfig::default(),
            pipeline: PipelineSection::default(),
        }
        .resolved()
    }

    /// Parse TOML or JSON by file extension, derive seeds and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?,
            _ => bail!(Config, "config {} must end in .toml or .json", path.display()),
        };
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy of the config with every sub-seed derived from `seed`.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.synth.seed = s;
        self.pretrain.seed = s.wrapping_add(1);
        self.lora.train.seed = s.wrapping_add(2);
        self.temporal_train.seed = s.wrapping_add(4);
        self
    }

    /// Seed of the stage-1 initialisation.
    pub fn init_seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the stage-2 initialisation.
    pub fn temporal_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.lora.train.validate()?;
        if self.corpus.test_videos >= self.corpus.videos {
            bail!(Config, "held-out count {} leaves no training videos out of {}", self.corpus.test_videos, self.corpus.videos);
        }
        if !(self.pipeline.clip_s > 0.0 && self.pipeline.eval_fps > 0.0) {
            bail!(Config, "clip length and evaluation fps must be positive");
        }
        let p = &self.paths;
        for path in [&p.corpus, &p.stage1, &p.stage2, &p.features].into_iter().flatten() {
            if !path.exists() {
                bail!(Config, "configured path {} does not exist", path.display());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
