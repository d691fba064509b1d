//! Run configuration, read from TOML with sections `data`, `model`, `loss`,
//! `train` and `intervention`. Every key is optional and falls back to the
//! default documented on its field.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MipError, Result};
use crate::intervention::InterventionConfig;
use crate::memory::PromptKind;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub intervention: InterventionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (`meta.json`, `features.csv`, `adjacency.csv`).
    pub path: Option<PathBuf>,
    /// Generate data in memory instead of reading `path`.
    pub synthetic: Option<SynthConfig>,
    /// Input and output window length `T`. Default 12.
    pub window: usize,
    /// Fractions for train/val/test0/test1/test2. Default 0.6/0.1/0.1/0.1/0.1.
    pub splits: [f64; 5],
    /// Overrides `mask_zeros` from `meta.json` when set.
    pub mask_zeros: Option<bool>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: None,
            window: 12,
            splits: [0.6, 0.1, 0.1, 0.1, 0.1],
            mask_zeros: None,
        }
    }
}

/// Component switches for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Backbone alone on the raw inputs.
    Backbone,
    /// Backbone plus the memory-derived semantic graph.
    AddAdpAdj,
    /// Backbone fed with invariant prompts.
    AddPrompt,
    /// Prompts and invariant learning without the semantic graph.
    WoAdpAdj,
    /// Prompts and semantic graph without invariant learning.
    WoInvariantLearning,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub prompts: bool,
    pub semantic_graph: bool,
    pub invariant_learning: bool,
    pub memory_reg: bool,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Backbone,
        Variant::AddAdpAdj,
        Variant::AddPrompt,
        Variant::WoAdpAdj,
        Variant::WoInvariantLearning,
        Variant::Full,
    ];

    pub fn components(self) -> Components {
        let (prompts, semantic_graph, invariant_learning) = match self {
            Variant::Backbone => (false, false, false),
            Variant::AddAdpAdj => (false, true, false),
            Variant::AddPrompt => (true, false, false),
            Variant::WoAdpAdj => (true, false, true),
            Variant::WoInvariantLearning => (true, true, false),
            Variant::Full => (true, true, true),
        };
        Components {
            prompts,
            semantic_graph,
            invariant_learning,
            memory_reg: prompts,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Backbone => "Backbone",
            Variant::AddAdpAdj => "add adp-adj",
            Variant::AddPrompt => "add prompt",
            Variant::WoAdpAdj => "w/o adp-adj",
            Variant::WoInvariantLearning => "w/o invariant learning",
            Variant::Full => "MIP",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Backbone => "backbone",
            Variant::AddAdpAdj => "add-adp-adj",
            Variant::AddPrompt => "add-prompt",
            Variant::WoAdpAdj => "wo-adp-adj",
            Variant::WoInvariantLearning => "wo-invariant-learning",
            Variant::Full => "full",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = MipError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| MipError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxPredictor {
    /// A second, independently parameterized copy of the backbone.
    Backbone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Prompt and hidden width `d`. Default 32.
    pub hidden_dim: usize,
    /// Memory bank size `M`. Default 30.
    pub num_prototypes: usize,
    /// Default 3.
    pub num_st_layers: usize,
    /// Highest transition power `Z`. Default 2.
    pub diffusion_order: usize,
    /// Default 1.
    pub attention_heads: usize,
    /// Feedforward width inside the temporal block. Default `2 · hidden_dim`.
    pub ffn_dim: Option<usize>,
    /// Learnable `T×d` embedding added before temporal attention. Default true.
    pub positional_embedding: bool,
    /// Which prompt stack feeds the prediction backbone. Default invariant.
    pub init_prompt: PromptKind,
    /// Default full.
    pub variant: Variant,
    pub aux_predictor: AuxPredictor,
    /// Parameter initialization seed. Default 0.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_prototypes: 30,
            num_st_layers: 3,
            diffusion_order: 2,
            attention_heads: 1,
            ffn_dim: None,
            positional_embedding: true,
            init_prompt: PromptKind::Invariant,
            variant: Variant::Full,
            aux_predictor: AuxPredictor::Backbone,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        self.ffn_dim.unwrap_or(2 * self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_st_layers == 0 || self.attention_heads == 0 {
            return Err(MipError::Config("model dimensions must be positive".into()));
        }
        let c = self.variant.components();
        if (c.prompts || c.semantic_graph) && self.num_prototypes == 0 {
            return Err(MipError::Config("memory bank needs at least one prototype".into()));
        }
        if c.memory_reg && self.num_prototypes < 2 {
            return Err(MipError::Config(format!(
                "memory regularization needs num_prototypes ≥ 2, got {}",
                self.num_prototypes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    #[default]
    Population,
}

/// How the memory regularizer is reduced over `(sample, step, node)` slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Variance weight of the invariant loss. Default 0.3.
    pub lambda1: f64,
    /// Weight of the memory regularizer. Default 0.1.
    pub lambda2: f64,
    /// Hinge margin `κ`. Default 1.0.
    pub margin: f64,
    pub variance_mode: VarianceMode,
    /// Default mean.
    pub reg_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.1,
            margin: 1.0,
            variance_mode: VarianceMode::Population,
            reg_reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("margin", self.margin)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MipError::Config(format!("loss.{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Default 0.001.
    pub learning_rate: f64,
    /// Default 64.
    pub batch_size: usize,
    /// Default 100.
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping. Default 15.
    pub early_stop_patience: usize,
    /// Global gradient-norm clip. Default 5.0.
    pub grad_clip_norm: f64,
    /// Shuffling seed. Default 0.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            early_stop_patience: 15,
            grad_clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MipError::Config("train.learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(MipError::Config("train.batch_size and early_stop_patience must be positive".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(MipError::Config("train.grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| MipError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MipError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.intervention.validate()?;
        if self.data.window == 0 {
            return Err(MipError::Config("data.window must be positive".into()));
        }
        Ok(())
    }

    /// Applies a `section.key=value` override, parsing `value` as TOML.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| MipError::Config(format!("override `{assignment}` is not key=value")))?;
        let mut doc: toml::Table =
            toml::from_str(&self.to_toml_string()).map_err(|e| MipError::Config(e.to_string()))?;
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, sections) = parts.split_last().expect("split yields one part");
        let mut table = &mut doc;
        for s in sections {
            table = table
                .entry(s.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| MipError::Config(format!("`{s}` is not a section")))?;
        }
        table.insert(last.to_string(), parsed);
        let text = toml::to_string(&doc).map_err(|e| MipError::Config(e.to_string()))?;
        *self = Config::from_toml_str(&text)?;
        Ok(())
    }

    /// Full-scale settings for a METR-LA-style speed dataset.
    pub fn metr_la(path: PathBuf) -> Self {
        Self {
            data: DataConfig {
                path: Some(path),
                window: 12,
                mask_zeros: Some(true),
                ..DataConfig::default()
            },
            loss: LossConfig {
                lambda1: 0.3,
                lambda2: 0.1,
                ..LossConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                ..TrainConfig::default()
            },
            ..Config::default()
        }
    }

    /// Full-scale settings for an NYCBike1-style grid dataset.
    pub fn nyc_bike(path: PathBuf) -> Self {
        Self {
            data: DataConfig {
                path: Some(path),
                window: 6,
                mask_zeros: Some(false),
                ..DataConfig::default()
            },
            loss: LossConfig {
                lambda1: 0.1,
                lambda2: 0.01,
                ..LossConfig::default()
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..Config::default()
        }
    }
}
