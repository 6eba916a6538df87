use std::path::{Path, PathBuf};

use cqa_core::boc_net::{NetworkConfig, TrainConfig, DEFAULT_MC_PASSES};
use cqa_core::geometry::{SurrogateThresholds, DEFAULT_SDSC_TOLERANCE_MM};
use cqa_core::synthgen::{RaterNoise, SynthConfig};
use cqa_core::uq::ClassRule;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// Which label a slice is trained and scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// `labels.csv` (geometric surrogate).
    #[default]
    Surrogate,
    /// Majority vote of the `raters.csv` panel.
    Manual,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub threshold: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
}

/// Settings shared by the CLI verbs, loadable from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub thresholds: SurrogateThresholds,
    pub sdsc_tolerance_mm: f64,
    /// MC-dropout passes per slice.
    pub mc_passes: usize,
    /// Overrides `network.dropout_rate` when set.
    pub dropout_rate: Option<f64>,
    pub class_rule: ClassRule,
    pub label_source: LabelSource,
    pub target_accuracy: f64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub rater_noise: RaterNoise,
    pub slices_per_subject: usize,
    pub paths: Paths,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            thresholds: SurrogateThresholds::default(),
            sdsc_tolerance_mm: DEFAULT_SDSC_TOLERANCE_MM,
            mc_passes: DEFAULT_MC_PASSES,
            dropout_rate: None,
            class_rule: ClassRule::default(),
            label_source: LabelSource::default(),
            target_accuracy: 0.9,
            network: NetworkConfig::small_cnn(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            rater_noise: RaterNoise::default(),
            slices_per_subject: 10,
            paths: Paths::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| ServiceError::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.network_config().validate()?;
        self.train.validate()?;
        if self.mc_passes == 0 {
            return Err(ServiceError::Usage("mc_passes must be >= 1".into()));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return Err(ServiceError::Usage(format!("target_accuracy {} outside (0, 1]", self.target_accuracy)));
        }
        Ok(())
    }

    /// Network settings with the dropout override applied.
    pub fn network_config(&self) -> NetworkConfig {
        let mut n = self.network.clone();
        if let Some(p) = self.dropout_rate {
            n.dropout_rate = p;
        }
        n
    }

    /// Synthesis settings with the shared thresholds and tolerance applied.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            thresholds: self.thresholds,
            sdsc_tolerance_mm: self.sdsc_tolerance_mm,
            ..self.synth.clone()
        }
    }
}
