//! TOML run configuration: one document describing the model, optimizer
//! overrides, optional adapter settings, paths, and the seed. Unknown keys
//! are rejected so a typo never silently falls back to a default.

use std::path::PathBuf;

use serde::Deserialize;

use eduqalm::error::{Error, Result};
use eduqalm::lora::LoraConfig;
use eduqalm::model::ModelConfig;
use eduqalm::pipeline::{InstructionTemplate, TemplateStyle};
use eduqalm::train::{OptimizerConfig, TrainMode};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerOverrides,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub template: Option<TemplateConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub run_log: PathBuf,
}

/// Optional per-field overrides on the published defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOverrides {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_length: Option<usize>,
    pub num_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub grad_clip: Option<f64>,
}

impl OptimizerOverrides {
    pub fn resolve(&self, config: &ModelConfig, mode: TrainMode) -> OptimizerConfig {
        let mut out = OptimizerConfig::defaults_for(&config.attention, mode);
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { out.$field = v; })*
            };
        }
        overlay!(beta1, beta2, warmup_ratio, weight_decay, batch_size, max_length, num_epochs, learning_rate);
        if let Some(clip) = self.grad_clip {
            out.grad_clip = Some(clip);
        }
        out
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    #[serde(default)]
    pub style: Option<TemplateStyle>,
    #[serde(default)]
    pub body: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
}

impl RunConfigFile {
    pub fn parse(raw: &str) -> Result<Self> {
        let parsed: RunConfigFile =
            toml::from_str(raw).map_err(|e| Error::Config(format!("run config: {e}")))?;
        parsed.model.validate()?;
        Ok(parsed)
    }

    /// Training template from the config, defaulting to the built-in one
    /// for the configured (or plain) style.
    pub fn template(&self) -> InstructionTemplate {
        let style = self
            .template
            .as_ref()
            .and_then(|t| t.style)
            .unwrap_or(TemplateStyle::Plain);
        let mut template = InstructionTemplate::builtin_training(style);
        if let Some(cfg) = &self.template {
            if let Some(body) = &cfg.body {
                template.body = body.clone();
            }
            if let Some(name) = &cfg.name {
                template.name = name.clone();
            }
        }
        template
    }

    /// Paths must be resolvable at launch: the corpus has to exist, the
    /// output directories get created.
    pub fn check_paths(&self) -> Result<()> {
        if !self.paths.corpus.is_file() {
            return Err(Error::Config(format!(
                "corpus path {} is not a readable file",
                self.paths.corpus.display()
            )));
        }
        std::fs::create_dir_all(&self.paths.checkpoint_dir)?;
        if let Some(parent) = self.paths.run_log.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        Ok(())
    }
}
