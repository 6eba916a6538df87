use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{corn_loss, ForwardMode, Network};
use super::params::ModelParameters;
use crate::error::{QaError, Result};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs at which every learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            milestones: vec![20],
            lr_decay: 0.2,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(QaError::Config("batch_size must be >= 1".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QaError::Config(format!("milestones must be strictly increasing: {:?}", self.milestones)));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.lr_decay > 0.0) {
            return Err(QaError::Config("learning rate, weight decay and decay factor must be non-negative".into()));
        }
        Ok(())
    }

    /// Multiplier applied to the base rates during `epoch` (0-based).
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Deterministic validation loss per epoch, when a validation split was given.
    pub val_loss_trace: Vec<f64>,
    /// Epoch whose parameters were returned (best validation loss), if validated.
    pub best_epoch: Option<usize>,
    pub warnings: Vec<String>,
}

struct Adam {
    m: ModelParameters,
    v: ModelParameters,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParameters, grads: &ModelParameters, group_lr: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let layer_lr: Vec<f64> = (0..params.layers.len())
            .map(|l| group_lr[params.group_of_layer(l)])
            .collect();
        let tensors = params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().zip(self.v.tensors_mut()));
        for (((layer, _, p), (_, _, g)), ((_, _, m), (_, _, v))) in tensors {
            let lr = layer_lr[layer];
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

fn check_dataset(net: &Network, data: &[Example], warnings: &mut Vec<String>) -> Result<()> {
    if data.is_empty() {
        return Err(QaError::EmptyInput("training set is empty".into()));
    }
    let units = net.config().head_outputs();
    for (i, ex) in data.iter().enumerate() {
        if ex.input.len() != net.input_len() {
            return Err(QaError::Dimension(format!(
                "example {i} has {} inputs, expected {}",
                ex.input.len(),
                net.input_len()
            )));
        }
        if ex.label as usize > units {
            return Err(QaError::Domain(format!("example {i} has label {}", ex.label)));
        }
    }
    let first = data[0].label;
    if data.iter().all(|e| e.label == first) {
        let msg = format!("all {} training examples have label {first}; training proceeds on degenerate data", data.len());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if !data.iter().any(|e| e.label >= 1) {
        let msg = "no example has rank >= 1; the second head unit receives no training signal".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(())
}

/// Mean deterministic CORN loss over `data` (no weight decay).
fn eval_loss(net: &Network, params: &ModelParameters, data: &[Example]) -> Result<f64> {
    let mut rng = rng_from_seed(0);
    let mut weighted = 0.0;
    let mut total = 0usize;
    for chunk in data.chunks(64) {
        let batch: Vec<(&[f64], u8)> = chunk.iter().map(|e| (e.input.as_slice(), e.label)).collect();
        let (loss, _) = corn_loss(net, params, &batch, 0.0, ForwardMode::Deterministic, &mut rng)?;
        weighted += loss * chunk.len() as f64;
        total += chunk.len();
    }
    Ok(weighted / total as f64)
}

fn run_training(
    net: &Network,
    initial: ModelParameters,
    group_lr: &[f64],
    cfg: &TrainConfig,
    data: &[Example],
    validation: Option<&[Example]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.check_params(&initial)?;
    let mut warnings = Vec::new();
    check_dataset(net, data, &mut warnings)?;
    if let Some(val) = validation {
        check_dataset(net, val, &mut Vec::new())?;
    }

    let mut params = initial;
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let mut dropout_rng = rng_from_seed(derive_seed(cfg.seed, 2));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut val_loss_trace = Vec::new();
    let mut best: Option<(f64, usize, ModelParameters)> = None;

    for epoch in 0..cfg.epochs {
        let factor = cfg.lr_factor(epoch);
        let lrs: Vec<f64> = group_lr.iter().map(|lr| lr * factor).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], u8)> = chunk.iter().map(|&i| (data[i].input.as_slice(), data[i].label)).collect();
            let (loss, grads) = corn_loss(net, &params, &batch, cfg.weight_decay, ForwardMode::TrainStochastic, &mut dropout_rng)?;
            adam.update(&mut params, &grads, &lrs, cfg);
            epoch_loss += loss;
            batches += 1;
        }
        let mean_loss = epoch_loss / batches as f64;
        log::debug!("epoch {epoch}: loss {mean_loss:.5}");
        loss_trace.push(mean_loss);
        if !params.all_finite() {
            return Err(QaError::Domain(format!("parameters diverged at epoch {epoch}")));
        }
        if let Some(val) = validation {
            let vl = eval_loss(net, &params, val)?;
            val_loss_trace.push(vl);
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, epoch, params.clone()));
            }
        }
    }

    let (mut params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, Some(epoch)),
        None => (params, None),
    };
    params.round_to_f32();
    Ok(TrainOutcome {
        params,
        loss_trace,
        val_loss_trace,
        best_epoch,
        warnings,
    })
}

/// Train from freshly initialised parameters (seeded by `cfg.seed`) with
/// Adam, stochastic dropout and the multi-step schedule. With a validation
/// split the parameters of the epoch with the lowest validation loss are
/// returned, otherwise the final ones. Parameters are rounded to `f32`.
pub fn train(cfg: &TrainConfig, net: &Network, data: &[Example], validation: Option<&[Example]>) -> Result<TrainOutcome> {
    let init = net.init_params(derive_seed(cfg.seed, 0));
    let lrs = vec![cfg.learning_rate; init.groups.len()];
    run_training(net, init, &lrs, cfg, data, validation)
}

/// Continue training `pretrained` with one base learning rate per layer
/// group; each rate follows the schedule independently. `cfg.learning_rate`
/// is ignored. Every group must be listed exactly once.
pub fn fine_tune(
    pretrained: &ModelParameters,
    lr_groups: &[(String, f64)],
    cfg: &TrainConfig,
    net: &Network,
    data: &[Example],
    validation: Option<&[Example]>,
) -> Result<TrainOutcome> {
    net.check_params(pretrained)
        .map_err(|e| QaError::Config(format!("pretrained parameters: {e}")))?;
    let mut lrs = vec![None; pretrained.groups.len()];
    for (name, lr) in lr_groups {
        let idx = pretrained
            .group_index(name)
            .ok_or_else(|| QaError::Config(format!("unknown layer group '{name}'")))?;
        if lrs[idx].replace(*lr).is_some() {
            return Err(QaError::Config(format!("layer group '{name}' listed twice")));
        }
        if !(*lr >= 0.0) {
            return Err(QaError::Config(format!("learning rate for '{name}' must be >= 0")));
        }
    }
    let lrs = lrs
        .into_iter()
        .zip(&pretrained.groups)
        .map(|(lr, g)| lr.ok_or_else(|| QaError::Config(format!("no learning rate for layer group '{}'", g.name))))
        .collect::<Result<Vec<f64>>>()?;
    run_training(net, pretrained.clone(), &lrs, cfg, data, validation)
}

/// Class from a single dropout-free pass (conditional rule).
pub fn predict_class_deterministic(net: &Network, params: &ModelParameters, input: &[f64]) -> Result<u8> {
    let f = net.forward(params, input, ForwardMode::Deterministic, &mut rng_from_seed(0))?;
    Ok(f.iter().filter(|&&p| p > 0.5).count() as u8)
}

#[cfg(test)]
mod tests {
    use super::super::NetworkConfig;
    use super::*;

    fn small_set() -> Vec<Example> {
        (0..24)
            .map(|i| {
                let x = i as f64 / 24.0;
                Example {
                    input: vec![x, 1.0 - x],
                    label: (i * 3 / 24) as u8,
                }
            })
            .collect()
    }

    fn net() -> Network {
        Network::new(NetworkConfig {
            hidden: vec![6],
            ..NetworkConfig::mlp_features(2)
        })
        .unwrap()
    }

    #[test]
    fn schedule_factors() {
        let cfg = TrainConfig {
            milestones: vec![2, 4],
            ..Default::default()
        };
        assert_eq!(cfg.lr_factor(0), 1.0);
        assert_eq!(cfg.lr_factor(2), 0.2);
        assert!((cfg.lr_factor(5) - 0.04).abs() < 1e-15);
        let bad = TrainConfig {
            milestones: vec![4, 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let net = net();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let out = train(&cfg, &net, &small_set(), None).unwrap();
        assert_eq!(out.params, net.init_params(derive_seed(5, 0)));
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn same_seed_same_trace() {
        let net = net();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let a = train(&cfg, &net, &small_set(), None).unwrap();
        let b = train(&cfg, &net, &small_set(), None).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn degenerate_labels_warn_but_train() {
        let net = net();
        let data: Vec<Example> = small_set().into_iter().map(|e| Example { label: 0, ..e }).collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let out = train(&cfg, &net, &data, None).unwrap();
        assert_eq!(out.warnings.len(), 2);
        assert!(train(&cfg, &net, &[], None).is_err());
    }

    #[test]
    fn validation_picks_best_epoch() {
        let net = net();
        let data = small_set();
        let cfg = TrainConfig {
            epochs: 4,
            ..Default::default()
        };
        let out = train(&cfg, &net, &data, Some(&data)).unwrap();
        assert_eq!(out.val_loss_trace.len(), 4);
        let best = out.best_epoch.unwrap();
        let min = out.val_loss_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.val_loss_trace[best], min);
    }

    #[test]
    fn fine_tune_group_rules() {
        let net = net();
        let pre = net.init_params(1);
        let data = small_set();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let zero: Vec<(String, f64)> = net.config().group_names().into_iter().map(|g| (g, 0.0)).collect();
        let out = fine_tune(&pre, &zero, &cfg, &net, &data, None).unwrap();
        assert_eq!(out.params, pre);

        let frozen = vec![("hidden0".to_string(), 0.0), ("head".to_string(), 1e-2)];
        let out = fine_tune(&pre, &frozen, &cfg, &net, &data, None).unwrap();
        assert_eq!(out.params.layers[0], pre.layers[0]);
        assert_ne!(out.params.layers[1], pre.layers[1]);

        let missing = vec![("head".to_string(), 1e-3)];
        assert!(matches!(fine_tune(&pre, &missing, &cfg, &net, &data, None), Err(QaError::Config(_))));
        let unknown = vec![("conv".to_string(), 1e-3), ("hidden0".into(), 0.0), ("head".into(), 0.0)];
        assert!(matches!(fine_tune(&pre, &unknown, &cfg, &net, &data, None), Err(QaError::Config(_))));
        let other = Network::new(NetworkConfig::mlp_features(3)).unwrap();
        assert!(matches!(
            fine_tune(&other.init_params(0), &zero, &cfg, &net, &data, None),
            Err(QaError::Config(_))
        ));
    }
}
