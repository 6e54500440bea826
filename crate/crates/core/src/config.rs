//! Run configuration: one TOML file with nested sections, dotted-path
//! overrides, and an environment seed override.
//!
//! Unknown keys are rejected. The global `seed` is the only seed: it is
//! propagated into the training and synthesis sections after parsing, and
//! the `CAPE_SEED` environment variable overrides it. Every pipeline run
//! writes a `config_snapshot.toml` into its output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LintAction, Split, SynthConfig};
use crate::decode::{DecodeConfig, DecodeStrategy, InferenceMode};
use crate::density::BandwidthRule;
use crate::error::{Error, Result};
use crate::instructions::PromptStyle;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV_VAR: &str = "CAPE_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub strategy: DecodeStrategy,
    pub constrained: bool,
    pub max_new_tokens: usize,
    pub teacher_forced: bool,
    pub inference_mode: InferenceMode,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            strategy: DecodeStrategy::Greedy,
            constrained: true,
            max_new_tokens: 32,
            teacher_forced: false,
            inference_mode: InferenceMode::Single,
        }
    }
}

impl DecodeSection {
    pub fn to_decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: self.strategy,
            constrained: self.constrained,
            max_new_tokens: self.max_new_tokens,
            teacher_forced: self.teacher_forced,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    /// Draws per keypoint.
    pub samples: usize,
    /// Grid resolution G.
    pub grid: usize,
    /// Baseline Gaussian sigma, normalized units.
    pub baseline_sigma: f64,
    pub bandwidth: BandwidthRule,
    pub strategy: DecodeStrategy,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection {
            samples: 256,
            grid: 128,
            baseline_sigma: 0.05,
            bandwidth: BandwidthRule::Scott,
            strategy: DecodeStrategy::Temperature { t: 0.6 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory; defaults to `<output_dir>/dataset`.
    pub dataset_dir: Option<PathBuf>,
    /// Registry JSON override; defaults to `registry.json` in the dataset
    /// directory, falling back to the builtin registry.
    pub registry: Option<PathBuf>,
    /// Directory of prompt template overrides.
    pub templates_dir: Option<PathBuf>,
    pub lint: LintAction,
    /// Digits per coordinate axis (K).
    pub coordinate_digits: usize,
    pub coordinate_template: String,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset_dir: None,
            registry: None,
            templates_dir: None,
            lint: LintAction::Drop,
            coordinate_digits: 3,
            coordinate_template: crate::codec::DEFAULT_TEMPLATE.to_string(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    /// JSON file with a support/query pair array; presence selects
    /// pair-weighted evaluation.
    pub pair_list: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::Test,
            pair_list: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaStyle {
    DirectQa,
    StepByStepQa,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub enabled: bool,
    pub qa_style: QaStyle,
    pub epochs: usize,
    pub max_steps: Option<usize>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            enabled: false,
            qa_style: QaStyle::DirectQa,
            epochs: 1,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainSection,
    pub style: PromptStyle,
    pub decode: DecodeSection,
    pub density: DensitySection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parse a TOML string, apply dotted-path overrides, the environment
    /// seed, and seed propagation.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut value = toml::Value::Table(table);
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("config error: {e}")))?;
        if let Ok(seed_text) = std::env::var(SEED_ENV_VAR) {
            cfg.seed = seed_text.parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV_VAR}={seed_text:?} is not a valid seed"))
            })?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text, overrides)
    }

    /// Propagate the global seed and validate sections.
    pub fn finalize(&mut self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            self.output_dir = PathBuf::from("runs");
        }
        self.train.seed = self.seed;
        self.data.synth.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.style.validate()?;
        self.decode.strategy.validate()?;
        self.density.strategy.validate()?;
        if self.data.coordinate_digits == 0 || self.data.coordinate_digits > 9 {
            return Err(Error::Config(format!(
                "coordinate_digits {} outside 1..=9",
                self.data.coordinate_digits
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the snapshot every subcommand leaves in its output directory.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config_snapshot.toml"), self.to_toml())?;
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.data
            .dataset_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("dataset"))
    }
}

/// Apply one `section.key=value` override onto the parsed TOML tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override {spec:?} must look like section.key=value"))
    })?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    // Parse the value as TOML; fall back to a plain string.
    let parsed: toml::Value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?
        .insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}
