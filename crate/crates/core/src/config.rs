//! Run configuration: one TOML document with every hyperparameter, plus
//! dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::contrastive::{LossWeights, ProjectorConfig};
use crate::dataset::{DatasetKind, PreprocessConfig, Task};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ResolutionPlan};
use crate::synth::SynthConfig;
use crate::trainer::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub ref_seconds: f64,
    /// Keep only the final N seconds of each corrected trial. Defaults to 60
    /// for DREAMER-kind datasets and to the whole trial otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_last_seconds: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ref_seconds: 1.0,
            keep_last_seconds: None,
        }
    }
}

impl DataConfig {
    pub fn preprocess(&self, kind: DatasetKind) -> PreprocessConfig {
        let mut p = PreprocessConfig::for_kind(kind);
        p.ref_seconds = self.ref_seconds;
        if self.keep_last_seconds.is_some() {
            p.keep_last_seconds = self.keep_last_seconds;
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// When false, fine-tuning starts from randomly initialized encoders.
    pub enabled: bool,
    pub epochs: usize,
    /// Multiplies `epochs` (reduced budgets for desk runs).
    pub epoch_scale: f64,
    pub lr: f64,
    /// Slots per subject per mini-batch before augmentation.
    pub k: usize,
    pub cycles: usize,
    pub batches_per_pair: usize,
    pub use_tcl: bool,
    pub use_da: bool,
    pub use_cmcl: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 500,
            epoch_scale: 1.0,
            lr: 1e-4,
            k: 8,
            cycles: 3,
            batches_per_pair: 1,
            use_tcl: true,
            use_da: true,
            use_cmcl: true,
        }
    }
}

impl PretrainConfig {
    pub fn effective_epochs(&self) -> usize {
        ((self.epochs as f64 * self.epoch_scale).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub cycles: usize,
    pub freeze_encoders: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-3,
            batch: 256,
            cycles: 3,
            freeze_encoders: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub folds: usize,
    /// Share of training stimuli held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub loss: LossWeights,
    pub augment: AugmentPolicy,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub fusion: FusionConfig,
    pub plan: ResolutionPlan,
    pub adam: AdamConfig,
    pub protocol: ProtocolConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Arousal,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentPolicy::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            fusion: FusionConfig::default(),
            plan: ResolutionPlan::default(),
            adam: AdamConfig::default(),
            protocol: ProtocolConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced model and budget for CPU runs on the synthetic dataset.
    pub fn desk() -> Self {
        let mut c = Self {
            encoder: EncoderConfig {
                views: 4,
                d_e: 32,
                heads: 2,
                blocks: 2,
                ffn_dim: 64,
                prompts: 2,
                dropout: 0.1,
            },
            projector: ProjectorConfig {
                hidden: 64,
                out: 32,
                dropout: 0.1,
            },
            ..Self::default()
        };
        c.pretrain.epochs = 30;
        c.pretrain.lr = 1e-3;
        c.fusion.hidden = 64;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected reference or desk)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value`. The value is parsed as a TOML literal,
    /// falling back to a plain string. Unknown keys are rejected.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut doc = toml::Value::try_from(&*self).expect("config serializes");
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut table = doc.as_table_mut().expect("config is a table");
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
        }
        table.insert((*last).to_string(), value);
        let updated: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.plan.validate()?;
        self.synth.validate()?;
        let p = &self.pretrain;
        if p.epochs == 0 || p.k == 0 || p.batches_per_pair == 0 || !(p.lr > 0.0) || !(p.epoch_scale > 0.0) {
            return Err(Error::Config(
                "pretrain epochs, k, batches_per_pair, lr, and epoch_scale must be positive".into(),
            ));
        }
        if p.enabled && !p.use_tcl && !p.use_cmcl {
            return Err(Error::Config("pre-training needs use_tcl or use_cmcl".into()));
        }
        let f = &self.finetune;
        if f.epochs == 0 || f.batch < 2 || !(f.lr > 0.0) {
            return Err(Error::Config(
                "finetune epochs and lr must be positive and batch at least 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.protocol.val_fraction) || self.protocol.folds < 2 {
            return Err(Error::Config(
                "val_fraction must lie in [0, 1) and folds be at least 2".into(),
            ));
        }
        if !(self.fusion.aux_weight >= 0.0) || self.fusion.hidden == 0 {
            return Err(Error::Config(
                "fusion aux_weight must be non-negative and hidden positive".into(),
            ));
        }
        Ok(())
    }

    /// Augmentation actually applied during pre-training.
    pub fn effective_augment(&self) -> AugmentPolicy {
        if self.pretrain.use_da {
            self.augment.clone()
        } else {
            AugmentPolicy {
                expansion: 1,
                ..self.augment.clone()
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
