//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use semspeech::bridge::train::GanConfig;
use semspeech::corpus::{CorpusCounts, LanguageSizes, Split};
use semspeech::fusion::{FusionConfig, Variant};
use semspeech::lm::{AdapterConfig, DenoiseConfig};
use semspeech::tasks::{FinetuneConfig, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub language_seed: u64,
    pub noise_std: f64,
    pub sizes: LanguageSizes,
    pub counts: CorpusCounts,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { language_seed: 7, noise_std: 0.1, sizes: LanguageSizes::default(), counts: CorpusCounts::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub pretrain: DenoiseConfig,
    pub adapter: AdapterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub task: Task,
    /// Split scored by `finetune` and `ablate`.
    pub split: Split,
    /// Variants covered by `ablate`.
    pub variants: Vec<Variant>,
    /// Finetuning seeds used by `ablate`.
    pub seeds: Vec<u64>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { task: Task::Ic, split: Split::Test, variants: Variant::ALL.to_vec(), seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of the upstream stages and of single finetuning runs.
    pub seed: u64,
    pub output: PathBuf,
    pub corpus: CorpusSection,
    pub lm: LmSection,
    pub gan: GanConfig,
    pub fusion: FusionConfig,
    pub task: TaskSection,
    pub optimizer: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output: PathBuf::from("runs"),
            corpus: CorpusSection::default(),
            lm: LmSection::default(),
            gan: GanConfig::default(),
            fusion: FusionConfig::default(),
            task: TaskSection::default(),
            optimizer: FinetuneConfig::default(),
        }
    }
}

/// A parsed config together with the text it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
}

impl LoadedConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).context("invalid experiment config")?;
        Ok(Self { config, text: text.to_string() })
    }

    /// Reads `path`, or falls back to the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text)
            }
            None => Ok(Self::from_config(ExperimentConfig::default())),
        }
    }

    pub fn from_config(config: ExperimentConfig) -> Self {
        let text = toml::to_string(&config).expect("config serializes");
        Self { config, text }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(LoadedConfig::parse("").unwrap().config, ExperimentConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let c = LoadedConfig::from_config(ExperimentConfig::default());
        assert_eq!(LoadedConfig::parse(&c.text).unwrap().config, c.config);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(LoadedConfig::parse("sead = 3").is_err());
        assert!(LoadedConfig::parse("[gan]\nlamda = 1.0").is_err());
        assert!(LoadedConfig::parse("[corpus.sizes]\nphonemes = 6\nwords = 3").is_err());
    }

    #[test]
    fn partial_sections() {
        let c = LoadedConfig::parse("seed = 9\n[task]\ntask = \"sf\"\nvariants = [\"ssp_tune\"]\n[gan]\nsteps = 10\n").unwrap().config;
        assert_eq!(c.seed, 9);
        assert_eq!(c.task.task, Task::Sf);
        assert_eq!(c.task.variants, vec![Variant::SspTune]);
        assert_eq!(c.gan.steps, 10);
        assert_eq!(c.gan.lambda, GanConfig::default().lambda);
    }
}
