//! Run configuration read from a TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snmm::estimands::EstimandSpec;
use snmm::estimator::EstimatorConfig;
use snmm::panel::PanelSchema;
use snmm::simlab::DgpConfig;
use snmm::variance::VarianceConfig;
use snmm::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Estimate,
    Simulate,
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Exposure mapping by name, e.g. `neighbor_max`.
    #[serde(default)]
    pub mapping: Option<String>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default = "default_variance")]
    pub variance: VarianceConfig,
    #[serde(default)]
    pub estimands: Vec<EstimandSpec>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub dgp: Option<DgpConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_level() -> f64 {
    0.95
}

fn default_variance() -> VarianceConfig {
    VarianceConfig::Sandwich
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub panel: PathBuf,
    pub schema: PanelSchema,
    /// Whitespace edge list `i j [weight]` over the panel's unit ids.
    #[serde(default)]
    pub graph: Option<PathBuf>,
    /// Recode an absorbing 0/1 exposure to be 1 only at initiation.
    #[serde(default)]
    pub recode_absorbing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub replicates: usize,
    /// Also fit the interference-blind model (line network only).
    #[serde(default)]
    pub naive_comparison: bool,
    #[serde(default = "default_failure_rate")]
    pub max_failure_rate: f64,
    #[serde(default)]
    pub noise_check: Option<NoiseCheckConfig>,
}

fn default_failure_rate() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCheckConfig {
    pub n: usize,
    pub replicates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// A parsed config with the text it came from and the directory relative
/// paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub text: String,
    pub config: RunConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        if !(config.level > 0.0 && config.level < 1.0) {
            return Err(Error::Config(format!("level {} outside (0, 1)", config.level)));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { text, config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn model_text(&self) -> Result<String> {
        let model = self
            .config
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("missing [model]".into()))?;
        match (&model.text, &model.file) {
            (Some(t), None) => Ok(t.clone()),
            (None, Some(f)) => {
                let p = self.resolve(f);
                fs::read_to_string(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
            }
            _ => Err(Error::Config("[model] needs exactly one of `text` or `file`".into())),
        }
    }
}
