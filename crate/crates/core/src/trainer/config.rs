use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::losses::MatchDistance;
use crate::error::{Error, Result};
use crate::field::{EncodingConfig, FieldConfig};
use crate::proposer::{Architecture, ProposerConfig};
use crate::scenes::{SceneConfig, SceneKind};

/// Where fine samples come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Sampler {
    /// Inverse-CDF sampling of the coarse weights only (no proposer).
    Heuristic,
    Learnt(Architecture),
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Heuristic => f.write_str("heuristic"),
            Sampler::Learnt(a) => a.fmt(f),
        }
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "heuristic" {
            return Ok(Sampler::Heuristic);
        }
        s.parse().map(Sampler::Learnt).map_err(|_| {
            let names: Vec<&str> = Architecture::ALL.iter().map(|a| a.as_str()).collect();
            Error::Config(format!("unknown proposer `{s}` (heuristic, {})", names.join(", ")))
        })
    }
}

impl TryFrom<String> for Sampler {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Sampler> for String {
    fn from(s: Sampler) -> String {
        s.to_string()
    }
}

/// Hidden sizes of the proposer architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposerDims {
    pub mixer_token_hidden: usize,
    pub mixer_channel_hidden: usize,
    pub transformer_dim: usize,
    pub transformer_ff: usize,
    pub concat_encoding_dim: usize,
    pub transformer_positions: bool,
}

impl Default for ProposerDims {
    fn default() -> Self {
        let p = ProposerConfig::default();
        Self {
            mixer_token_hidden: p.mixer_token_hidden,
            mixer_channel_hidden: p.mixer_channel_hidden,
            transformer_dim: p.transformer_dim,
            transformer_ff: p.transformer_ff,
            concat_encoding_dim: p.concat_encoding_dim,
            transformer_positions: p.transformer_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub sampler: Sampler,
    pub with_importance: bool,
    /// Shared by the coarse and the fine network.
    pub field: FieldConfig,
    pub proposer: ProposerDims,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 128,
            sampler: Sampler::Learnt(Architecture::Mlpmix),
            with_importance: true,
            field: FieldConfig::default(),
            proposer: ProposerDims::default(),
        }
    }
}

impl ModelConfig {
    pub fn proposer_config(&self) -> Option<ProposerConfig> {
        let Sampler::Learnt(architecture) = self.sampler else {
            return None;
        };
        let d = self.proposer;
        Some(ProposerConfig {
            architecture,
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            with_importance: self.with_importance,
            feature_dim: self.field.width,
            mixer_token_hidden: d.mixer_token_hidden,
            mixer_channel_hidden: d.mixer_channel_hidden,
            transformer_dim: d.transformer_dim,
            transformer_ff: d.transformer_ff,
            concat_encoding_dim: d.concat_encoding_dim,
            transformer_positions: d.transformer_positions,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        if self.n_coarse < 2 || self.n_fine < 1 {
            return Err(Error::Config("need n_coarse >= 2 and n_fine >= 1".into()));
        }
        if let Some(p) = self.proposer_config() {
            p.validate()?;
        }
        Ok(())
    }
}

/// Two-stage schedule, or stage 2 only from a random proposer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    TwoStage,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: usize,
    pub batch_rays: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// Fraction of steps spent in stage 1.
    pub stage_split: f64,
    pub importance_threshold: f64,
    pub match_distance: MatchDistance,
    pub mode: TrainingMode,
    /// Stops the stage-1 proposer losses from reaching the coarse network.
    pub stage1_isolation: bool,
    pub val_every: usize,
    pub val_images: usize,
    /// Validation renders every `val_stride`-th pixel in each direction.
    pub val_stride: usize,
    pub early_stopping: bool,
    pub log_every: usize,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 20_000,
            batch_rays: 1024,
            lr_peak: 5e-4,
            warmup_steps: 1000,
            stage_split: 0.5,
            importance_threshold: 0.03,
            match_distance: MatchDistance::Squared,
            mode: TrainingMode::TwoStage,
            stage1_isolation: true,
            val_every: 500,
            val_images: 4,
            val_stride: 2,
            early_stopping: true,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_steps == 0 || self.batch_rays == 0 {
            return bad("total_steps and batch_rays must be >= 1");
        }
        if !(self.lr_peak > 0.0) {
            return bad("lr_peak must be positive");
        }
        if !(self.stage_split > 0.0 && self.stage_split < 1.0) {
            return bad("stage_split must lie in (0, 1)");
        }
        if !(self.importance_threshold > 0.0 && self.importance_threshold < 1.0) {
            return bad("importance_threshold must lie in (0, 1)");
        }
        if self.val_every == 0 || self.val_images == 0 || self.val_stride == 0 || self.log_every == 0 {
            return bad("val_every, val_images, val_stride and log_every must be >= 1");
        }
        Ok(())
    }

    /// Step at which stage 2 begins.
    pub fn stage1_steps(&self) -> usize {
        (self.total_steps as f64 * self.stage_split).round() as usize
    }
}

/// Full configuration of a run, as read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 4] = ["desk-spheres", "desk-boxes", "micro", "full-scale"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-spheres" => Ok(Self::desk(SceneKind::AnalyticSpheres)),
            "desk-boxes" => Ok(Self::desk(SceneKind::AnalyticBoxes)),
            "micro" => Ok(Self::micro()),
            "full-scale" => Ok(Self::default()),
            _ => Err(Error::Config(format!("unknown preset `{name}` ({})", PRESETS.join(", ")))),
        }
    }

    /// 64x64 toy scene, 32 coarse and 64 fine samples, small networks.
    pub fn desk(kind: SceneKind) -> Self {
        let field = FieldConfig {
            depth: 4,
            width: 64,
            skip_layer: 2,
            color_width: 32,
            encoding: EncodingConfig {
                num_frequencies_position: 6,
                num_frequencies_direction: 2,
                include_input: true,
            },
        };
        Self {
            scene: SceneConfig { kind, ..SceneConfig::default() },
            model: ModelConfig {
                n_coarse: 32,
                n_fine: 64,
                field,
                proposer: ProposerDims {
                    mixer_token_hidden: 32,
                    mixer_channel_hidden: 64,
                    ..ProposerDims::default()
                },
                ..ModelConfig::default()
            },
            train: TrainConfig { batch_rays: 16, lr_peak: 2e-3, ..TrainConfig::default() },
        }
    }

    /// Tiny configuration for tests and smoke runs.
    pub fn micro() -> Self {
        let field = FieldConfig {
            depth: 2,
            width: 16,
            skip_layer: 1,
            color_width: 8,
            encoding: EncodingConfig {
                num_frequencies_position: 3,
                num_frequencies_direction: 1,
                include_input: true,
            },
        };
        Self {
            scene: SceneConfig {
                height: 12,
                width: 12,
                focal: 17.0,
                n_train: 3,
                n_val: 1,
                n_test: 1,
                ..SceneConfig::default()
            },
            model: ModelConfig {
                n_coarse: 8,
                n_fine: 16,
                field,
                proposer: ProposerDims {
                    mixer_token_hidden: 8,
                    mixer_channel_hidden: 16,
                    transformer_dim: 8,
                    transformer_ff: 16,
                    concat_encoding_dim: 8,
                    transformer_positions: true,
                },
                ..ModelConfig::default()
            },
            train: TrainConfig {
                total_steps: 40,
                batch_rays: 8,
                warmup_steps: 5,
                val_every: 20,
                val_images: 1,
                val_stride: 1,
                log_every: 10,
                ..TrainConfig::default()
            },
        }
    }
}
