//! Bayesian ordinal classifier: a small dropout network whose `K - 1` sigmoid
//! outputs estimate the conditional probabilities `P(y >= k | y >= k - 1, x)`.
//!
//! Training uses the conditional (CORN) loss: head unit `k` only sees the
//! samples that reached rank `k - 1`. Dropout stays active at inference to
//! draw Monte Carlo samples from the approximate weight posterior.

mod checkpoint;
mod layers;
mod network;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use network::{corn_loss, mc_forward, ForwardMode, Network};
pub use params::{LayerGroup, ModelParameters, ParamLayer, Tensor};
pub use train::{fine_tune, predict_class_deterministic, train, Example, TrainConfig, TrainOutcome};

/// Default number of MC-dropout passes per slice.
pub const DEFAULT_MC_PASSES: usize = 20;

/// Ordinal ranks `0..K` and their extended binary coding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdinalScheme {
    pub num_classes: usize,
}

impl Default for OrdinalScheme {
    fn default() -> Self {
        Self { num_classes: 3 }
    }
}

impl OrdinalScheme {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(QaError::Config(format!("need at least two ordinal classes, got {num_classes}")));
        }
        Ok(Self { num_classes })
    }

    /// `y_k = 1{y >= k}` for `k = 1..K`.
    pub fn encode(&self, y: u8) -> Result<Vec<u8>> {
        if y as usize >= self.num_classes {
            return Err(QaError::Domain(format!("label {y} outside 0..{}", self.num_classes)));
        }
        Ok((1..self.num_classes).map(|k| (y as usize >= k) as u8).collect())
    }

    pub fn decode(&self, code: &[u8]) -> u8 {
        code.iter().map(|&b| b as u32).sum::<u32>() as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Two conv blocks and one hidden dense layer over a `C x S x S` slice.
    SmallCnn,
    /// Fully connected layers over a geometric feature vector.
    MlpFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    /// SmallCnn: input channels.
    pub input_channels: usize,
    /// SmallCnn: square input side; must be a multiple of 8.
    pub input_size: usize,
    /// SmallCnn: output channels of the two conv layers.
    pub conv_channels: [usize; 2],
    /// MlpFeatures: length of the feature vector.
    pub n_features: usize,
    /// Hidden dense widths. SmallCnn uses exactly one.
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::small_cnn()
    }
}

impl NetworkConfig {
    pub fn small_cnn() -> Self {
        Self {
            backbone: Backbone::SmallCnn,
            input_channels: 2,
            input_size: 64,
            conv_channels: [8, 16],
            n_features: 0,
            hidden: vec![32],
            dropout_rate: 0.1,
            num_classes: 3,
        }
    }

    pub fn mlp_features(n_features: usize) -> Self {
        Self {
            backbone: Backbone::MlpFeatures,
            input_channels: 0,
            input_size: 0,
            conv_channels: [0, 0],
            n_features,
            hidden: vec![32, 16],
            dropout_rate: 0.1,
            num_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        OrdinalScheme::new(self.num_classes)?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(QaError::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.hidden.contains(&0) {
            return Err(QaError::Config("hidden widths must be positive".into()));
        }
        match self.backbone {
            Backbone::SmallCnn => {
                if self.input_channels == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(8) {
                    return Err(QaError::Config(format!(
                        "small_cnn needs channels >= 1 and a side divisible by 8, got {}x{}",
                        self.input_channels, self.input_size
                    )));
                }
                if self.conv_channels.contains(&0) || self.hidden.len() != 1 {
                    return Err(QaError::Config("small_cnn needs two conv widths and one hidden width".into()));
                }
            }
            Backbone::MlpFeatures => {
                if self.n_features == 0 || self.hidden.is_empty() {
                    return Err(QaError::Config("mlp_features needs features and at least one hidden layer".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        match self.backbone {
            Backbone::SmallCnn => self.input_channels * self.input_size * self.input_size,
            Backbone::MlpFeatures => self.n_features,
        }
    }

    pub fn head_outputs(&self) -> usize {
        self.num_classes - 1
    }

    /// Names of the layer groups, in network order.
    pub fn group_names(&self) -> Vec<String> {
        match self.backbone {
            Backbone::SmallCnn => vec!["conv".into(), "dense".into(), "head".into()],
            Backbone::MlpFeatures => (0..self.hidden.len())
                .map(|i| format!("hidden{i}"))
                .chain(std::iter::once("head".to_string()))
                .collect(),
        }
    }
}
