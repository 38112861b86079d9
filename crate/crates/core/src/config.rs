//! TOML run configuration.
//!
//! ```toml
//! [model]
//! llm_layers = 2
//! h_llm = 8
//!
//! [encoder]
//! num_layers = 4
//!
//! [moe]          # optional; presence enables the mixture of experts
//! segments = 2
//!
//! [flops]        # optional scenario for `cost`
//! B = 1
//! ...
//!
//! [run]
//! seed = 0
//! steps = 200
//! ```
//!
//! Missing keys take the toy defaults; unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::flops::FlopsScenario;
use crate::fusion::MaskMode;
use crate::model::{ModelConfig, TrainOptions, TrainStage};
use crate::moe::MoeConfig;
use crate::vision::EncoderConfig;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub llm_layers: usize,
    pub h_llm: usize,
    pub heads: usize,
    pub vocab: usize,
    pub media_len: usize,
    pub r_xc: f64,
    pub r_xf: f64,
    pub pad_len: usize,
    pub mask_mode: MaskMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy();
        Self {
            llm_layers: t.llm_layers,
            h_llm: t.h_llm,
            heads: t.heads,
            vocab: t.vocab,
            media_len: t.media_len,
            r_xc: t.r_xc,
            r_xf: t.r_xf,
            pad_len: t.pad_len,
            mask_mode: t.mask_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub stage: String,
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            seed: t.seed,
            lr: t.lr,
            steps: t.steps,
            stage: t.stage.name().to_string(),
            classes: t.classes,
            samples_per_class: t.samples_per_class,
            noise: t.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "toy_encoder")]
    pub encoder: EncoderConfig,
    pub moe: Option<MoeConfig>,
    pub flops: Option<FlopsScenario>,
    #[serde(default)]
    pub run: RunSection,
}

fn toy_encoder() -> EncoderConfig {
    ModelConfig::toy().encoder
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            encoder: toy_encoder(),
            moe: None,
            flops: None,
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if let Some(f) = &self.flops {
            f.validate()?;
        }
        self.train_options()?;
        let r = &self.run;
        if !(r.lr.is_finite() && r.lr >= 0.0) || !(r.noise.is_finite() && r.noise >= 0.0) {
            return Err(Error::config(
                "run.lr and run.noise must be finite and non-negative",
            ));
        }
        if r.samples_per_class == 0 {
            return Err(Error::config("run.samples_per_class must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            llm_layers: m.llm_layers,
            h_llm: m.h_llm,
            heads: m.heads,
            vocab: m.vocab,
            media_len: m.media_len,
            r_xc: m.r_xc,
            r_xf: m.r_xf,
            pad_len: m.pad_len,
            mask_mode: m.mask_mode,
            moe: self.moe.clone(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        let r = &self.run;
        Ok(TrainOptions {
            steps: r.steps,
            lr: r.lr,
            stage: r.stage.parse::<TrainStage>()?,
            classes: r.classes,
            samples_per_class: r.samples_per_class,
            noise: r.noise,
            seed: r.seed,
        })
    }
}
