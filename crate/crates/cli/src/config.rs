//! Resolved run configurations.
//!
//! Every command resolves its flags (with optional defaults from a
//! `--config` JSON file) into one of these structs, then writes the result
//! next to its outputs, so any run can be reproduced from the emitted file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zsad_core::align::{LossConfig, TrainConfig};
use zsad_core::data::synth::SyntheticSpec;
use zsad_core::encoder::ModelConfig;
use zsad_core::error::{Error, Result};
use zsad_core::selector::SelectorConfig;

/// How prompt features are obtained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSource {
    pub preset: Option<String>,
    pub preset_file: Option<PathBuf>,
    pub object_name: String,
    /// Imported embedding table; when absent the synthetic encoder is used.
    pub embeddings: Option<PathBuf>,
    pub text_seed: u64,
    pub text_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitModelConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSynthConfig {
    pub out: PathBuf,
    pub spec: SyntheticSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedPromptsConfig {
    pub out: PathBuf,
    pub prompts: PromptSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectConfig {
    pub out: PathBuf,
    pub prompts: PromptSource,
    pub selector: SelectorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectConfig {
    pub model: PathBuf,
    pub data_root: PathBuf,
    pub category: String,
    pub out: PathBuf,
    pub prompts: PromptSource,
    pub selector: SelectorConfig,
    pub temperature: f64,
    pub projections: Option<PathBuf>,
    pub baseline: bool,
    pub smooth_sigma: Option<f64>,
    pub jobs: usize,
    pub save_maps: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCommandConfig {
    pub model: PathBuf,
    pub data_root: PathBuf,
    pub category: String,
    pub out: PathBuf,
    pub prompts: PromptSource,
    pub selector: SelectorConfig,
    pub temperature: f64,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub init_seed: u64,
    pub jobs: usize,
    /// Keep the epoch with the best image-level AUROC on the evaluation
    /// split instead of the last epoch.
    pub select_best_by_auroc: bool,
    pub eval_root: Option<PathBuf>,
    pub eval_category: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub model: PathBuf,
    pub data_root: PathBuf,
    pub category: String,
    pub out: PathBuf,
    pub prompts: PromptSource,
    pub selector: SelectorConfig,
    pub temperature: f64,
    pub projections: Option<PathBuf>,
    pub baseline: bool,
    pub smooth_sigma: Option<f64>,
    pub jobs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderConfig {
    pub map: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub smooth_sigma: Option<f64>,
}

/// The resolved configuration of any run, tagged by subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum RunConfig {
    InitModel(InitModelConfig),
    GenSynth(GenSynthConfig),
    EmbedPrompts(EmbedPromptsConfig),
    Select(SelectConfig),
    Detect(DetectConfig),
    Train(TrainCommandConfig),
    Evaluate(EvaluateConfig),
    Render(RenderConfig),
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("config file {}: {e}", path.display())))
    }

    /// Write the resolved config next to the outputs: `config.json` inside a
    /// directory output, `<name>.config.json` beside a file output.
    pub fn write_next_to(&self, out: &Path, out_is_dir: bool) -> Result<()> {
        let path = if out_is_dir {
            out.join("config.json")
        } else {
            let mut name = out
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_else(|| "out".to_string());
            name.push_str(".config.json");
            out.with_file_name(name)
        };
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
