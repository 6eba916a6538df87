//! Finite-difference gradient checking for the ordinal loss.

use cqa_core::boc_net::{corn_loss, ForwardMode, ModelParameters, Network, NetworkConfig};
use cqa_core::rng::rng_from_seed;
use rand::Rng;

pub fn tiny_cnn(dropout: f64) -> NetworkConfig {
    NetworkConfig {
        input_channels: 2,
        input_size: 8,
        conv_channels: [3, 4],
        hidden: vec![6],
        dropout_rate: dropout,
        ..NetworkConfig::small_cnn()
    }
}

pub fn small_mlp(n: usize, dropout: f64) -> NetworkConfig {
    NetworkConfig {
        hidden: vec![7, 5],
        dropout_rate: dropout,
        ..NetworkConfig::mlp_features(n)
    }
}

/// Initialised parameters with random (non-zero) biases.
pub fn random_params(net: &Network, seed: u64) -> ModelParameters {
    let mut p = net.init_params(seed);
    let mut rng = rng_from_seed(seed ^ 0xb1a5);
    for layer in &mut p.layers {
        for b in &mut layer.bias.data {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn random_batch(net: &Network, n: usize, seed: u64) -> Vec<(Vec<f64>, u8)> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|i| {
            let x = (0..net.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            (x, (i % 3) as u8)
        })
        .collect()
}

pub fn loss_at(net: &Network, p: &ModelParameters, batch: &[(&[f64], u8)], wd: f64, mode: ForwardMode, seed: u64) -> f64 {
    corn_loss(net, p, batch, wd, mode, &mut rng_from_seed(seed)).unwrap().0
}

pub fn coord(p: &mut ModelParameters, layer: usize, is_bias: bool, k: usize) -> &mut f64 {
    let l = &mut p.layers[layer];
    if is_bias {
        &mut l.bias.data[k]
    } else {
        &mut l.weight.data[k]
    }
}

/// Central differences on every coordinate of every tensor. The dropout
/// stream is re-seeded for each evaluation so all evaluations share masks.
///
/// Returns the worst `error / allowed` ratio, where the allowance is 1e-4
/// relative with a 1e-6 absolute floor, and the number of coordinates checked.
pub fn check_gradient(cfg: NetworkConfig, seed: u64, mode: ForwardMode) -> (f64, usize) {
    let net = Network::new(cfg).unwrap();
    let params = random_params(&net, seed);
    let owned = random_batch(&net, 5, seed + 100);
    let batch: Vec<(&[f64], u8)> = owned.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let wd = 1e-2;
    let dseed = seed + 7;
    let (_, grad) = corn_loss(&net, &params, &batch, wd, mode, &mut rng_from_seed(dseed)).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (li, layer) in params.layers.iter().enumerate() {
        for is_bias in [false, true] {
            let len = if is_bias { layer.bias.data.len() } else { layer.weight.data.len() };
            for k in 0..len {
                let mut plus = params.clone();
                let mut minus = params.clone();
                *coord(&mut plus, li, is_bias, k) += h;
                *coord(&mut minus, li, is_bias, k) -= h;
                let numeric = (loss_at(&net, &plus, &batch, wd, mode, dseed) - loss_at(&net, &minus, &batch, wd, mode, dseed))
                    / (2.0 * h);
                let g = if is_bias { &grad.layers[li].bias } else { &grad.layers[li].weight };
                let analytic = g.data[k];
                let err = (analytic - numeric).abs();
                let allowed = (1e-4 * analytic.abs().max(numeric.abs())).max(1e-6);
                if err > allowed {
                    eprintln!("layer {li} bias={is_bias} coord {k}: analytic {analytic} vs numeric {numeric}");
                }
                worst = worst.max(err / allowed);
                checked += 1;
            }
        }
    }
    (worst, checked)
}
