use rand::Rng;

use super::layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, maxpool_backward, maxpool_forward, ConvShape,
};
use super::params::{init_layer, LayerGroup, ModelParameters};
use super::{Backbone, NetworkConfig};
use crate::error::{QaError, Result};
use crate::rng::{rng_from_seed, sub_rng, QaRng};
use crate::uq::McProbs;

/// Dropout behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Fresh dropout masks, as during training.
    TrainStochastic,
    /// Fresh dropout masks at inference (MC dropout).
    EvalStochastic,
    /// No dropout. With inverted dropout no rescaling is needed.
    Deterministic,
}

impl ForwardMode {
    fn stochastic(self) -> bool {
        !matches!(self, ForwardMode::Deterministic)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Conv { layer: usize, shape: ConvShape },
    Relu,
    Dropout,
    MaxPool { c: usize, h: usize, w: usize },
    Dense { layer: usize, n_in: usize, n_out: usize },
}

/// Compiled layer plan for a [`NetworkConfig`].
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    ops: Vec<Op>,
    /// Weight shape and fan-in of each parametric layer.
    layer_shapes: Vec<(Vec<usize>, usize)>,
    groups: Vec<LayerGroup>,
}

/// Per-pass record of activations needed by backpropagation.
struct Trace {
    /// `acts[i]` is the input of op `i`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
    dropout_masks: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<u32>>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut ops = Vec::new();
        let mut layer_shapes = Vec::new();
        let mut groups = Vec::new();
        let mut push_group = |name: String, start: usize, end: usize| groups.push(LayerGroup { name, layers: start..end });
        let head = config.head_outputs();
        match config.backbone {
            Backbone::SmallCnn => {
                let s = config.input_size;
                let [c1, c2] = config.conv_channels;
                let conv1 = ConvShape::new(config.input_channels, c1, 5, 2, 2, s, s);
                let conv2 = ConvShape::new(c1, c2, 3, 1, 1, conv1.out_h / 2, conv1.out_w / 2);
                ops.push(Op::Conv { layer: 0, shape: conv1 });
                ops.extend([Op::Relu, Op::Dropout, Op::MaxPool { c: c1, h: conv1.out_h, w: conv1.out_w }]);
                ops.push(Op::Conv { layer: 1, shape: conv2 });
                ops.extend([Op::Relu, Op::Dropout, Op::MaxPool { c: c2, h: conv2.out_h, w: conv2.out_w }]);
                layer_shapes.push((vec![c1, config.input_channels, 5, 5], config.input_channels * 25));
                layer_shapes.push((vec![c2, c1, 3, 3], c1 * 9));
                push_group("conv".into(), 0, 2);
                let flat = c2 * (conv2.out_h / 2) * (conv2.out_w / 2);
                let h = config.hidden[0];
                ops.extend([Op::Dense { layer: 2, n_in: flat, n_out: h }, Op::Relu, Op::Dropout]);
                layer_shapes.push((vec![h, flat], flat));
                push_group("dense".into(), 2, 3);
                ops.push(Op::Dense { layer: 3, n_in: h, n_out: head });
                layer_shapes.push((vec![head, h], h));
                push_group("head".into(), 3, 4);
            }
            Backbone::MlpFeatures => {
                let mut n_in = config.n_features;
                for (i, &h) in config.hidden.iter().enumerate() {
                    ops.extend([Op::Dense { layer: i, n_in, n_out: h }, Op::Relu, Op::Dropout]);
                    layer_shapes.push((vec![h, n_in], n_in));
                    push_group(format!("hidden{i}"), i, i + 1);
                    n_in = h;
                }
                let l = config.hidden.len();
                ops.push(Op::Dense { layer: l, n_in, n_out: head });
                layer_shapes.push((vec![head, n_in], n_in));
                push_group("head".into(), l, l + 1);
            }
        }
        Ok(Self {
            config,
            ops,
            layer_shapes,
            groups,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn input_len(&self) -> usize {
        self.config.input_len()
    }

    /// He-initialised parameters; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ModelParameters {
        let mut rng = rng_from_seed(seed);
        ModelParameters {
            layers: self
                .layer_shapes
                .iter()
                .map(|(shape, fan_in)| init_layer(shape.clone(), *fan_in, &mut rng))
                .collect(),
            groups: self.groups.clone(),
        }
    }

    /// All-zero parameters with the right shapes.
    pub fn zero_params(&self) -> ModelParameters {
        self.init_params(0).zeros_like()
    }

    /// Fails unless `params` has exactly this network's layer layout.
    pub fn check_params(&self, params: &ModelParameters) -> Result<()> {
        let shapes_match = params.layers.len() == self.layer_shapes.len()
            && params
                .layers
                .iter()
                .zip(&self.layer_shapes)
                .all(|(l, (s, _))| &l.weight.shape == s && l.bias.shape == vec![s[0]] && l.weight.len() == s.iter().product::<usize>());
        if !shapes_match || params.groups != self.groups {
            return Err(QaError::Dimension("parameters do not match the network architecture".into()));
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(QaError::Dimension(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.input_len()
            )));
        }
        Ok(())
    }

    fn run(&self, params: &ModelParameters, input: &[f64], mode: ForwardMode, rng: &mut QaRng) -> Trace {
        let p = self.config.dropout_rate;
        let keep_scale = 1.0 / (1.0 - p);
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        acts.push(input.to_vec());
        let mut dropout_masks = Vec::new();
        let mut pool_argmax = Vec::new();
        for op in &self.ops {
            let x = acts.last().expect("input pushed");
            let mut out = Vec::new();
            match op {
                Op::Conv { layer, shape } => {
                    let l = &params.layers[*layer];
                    conv_forward(shape, &l.weight.data, &l.bias.data, x, &mut out);
                }
                Op::Dense { layer, n_in, n_out } => {
                    let l = &params.layers[*layer];
                    dense_forward(*n_in, *n_out, &l.weight.data, &l.bias.data, x, &mut out);
                }
                Op::Relu => out.extend(x.iter().map(|&v| v.max(0.0))),
                Op::Dropout => {
                    if mode.stochastic() && p > 0.0 {
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
                            .collect();
                        out.extend(x.iter().zip(&mask).map(|(v, m)| v * m));
                        dropout_masks.push(mask);
                    } else {
                        out.extend_from_slice(x);
                        dropout_masks.push(Vec::new());
                    }
                }
                Op::MaxPool { c, h, w } => {
                    let mut arg = Vec::new();
                    maxpool_forward(*c, *h, *w, x, &mut out, &mut arg);
                    pool_argmax.push(arg);
                }
            }
            acts.push(out);
        }
        Trace {
            acts,
            dropout_masks,
            pool_argmax,
        }
    }

    /// Head logits for one input.
    pub fn logits(&self, params: &ModelParameters, input: &[f64], mode: ForwardMode, rng: &mut QaRng) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut trace = self.run(params, input, mode, rng);
        Ok(trace.acts.pop().expect("logits"))
    }

    /// Conditional probabilities `f_k` (sigmoid of each head unit).
    pub fn forward(&self, params: &ModelParameters, input: &[f64], mode: ForwardMode, rng: &mut QaRng) -> Result<Vec<f64>> {
        Ok(self.logits(params, input, mode, rng)?.into_iter().map(sigmoid).collect())
    }

    /// Backpropagate `grad_logits` through `trace`, accumulating into `grads`.
    fn backward(&self, params: &ModelParameters, trace: &Trace, grad_logits: &[f64], grads: &mut ModelParameters) {
        let mut grad = grad_logits.to_vec();
        let mut scratch = Vec::new();
        let mut drop_idx = trace.dropout_masks.len();
        let mut pool_idx = trace.pool_argmax.len();
        for (i, op) in self.ops.iter().enumerate().rev() {
            let input = &trace.acts[i];
            let need_input_grad = i > 0;
            match op {
                Op::Conv { layer, shape } => {
                    let g = &mut grads.layers[*layer];
                    conv_backward(
                        shape,
                        &params.layers[*layer].weight.data,
                        input,
                        &grad,
                        &mut g.weight.data,
                        &mut g.bias.data,
                        need_input_grad.then_some(&mut scratch),
                    );
                    std::mem::swap(&mut grad, &mut scratch);
                }
                Op::Dense { layer, n_in, n_out } => {
                    let g = &mut grads.layers[*layer];
                    dense_backward(
                        *n_in,
                        *n_out,
                        &params.layers[*layer].weight.data,
                        input,
                        &grad,
                        &mut g.weight.data,
                        &mut g.bias.data,
                        need_input_grad.then_some(&mut scratch),
                    );
                    std::mem::swap(&mut grad, &mut scratch);
                }
                Op::Relu => {
                    let out = &trace.acts[i + 1];
                    for (g, &o) in grad.iter_mut().zip(out) {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                Op::Dropout => {
                    drop_idx -= 1;
                    let mask = &trace.dropout_masks[drop_idx];
                    if !mask.is_empty() {
                        for (g, m) in grad.iter_mut().zip(mask) {
                            *g *= m;
                        }
                    }
                }
                Op::MaxPool { .. } => {
                    pool_idx -= 1;
                    maxpool_backward(input.len(), &trace.pool_argmax[pool_idx], &grad, &mut scratch);
                    std::mem::swap(&mut grad, &mut scratch);
                }
            }
            if !need_input_grad {
                break;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln(1 - sigmoid(z)) = ln(1 + e^z)`, computed stably.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Conditional ordinal loss and its gradient over a batch of `(input, label)`.
///
/// Head unit `j` (0-based) is trained on the samples with `y >= j` against
/// the target `1{y >= j + 1}`. The binary cross-entropies are summed over
/// all (unit, sample) pairs and divided by the number of such pairs, so a
/// unit with no eligible samples contributes nothing. `weight_decay` adds
/// `0.5 * wd * |W|^2` over weights (not biases).
pub fn corn_loss(
    net: &Network,
    params: &ModelParameters,
    batch: &[(&[f64], u8)],
    weight_decay: f64,
    mode: ForwardMode,
    rng: &mut QaRng,
) -> Result<(f64, ModelParameters)> {
    if batch.is_empty() {
        return Err(QaError::EmptyInput("loss needs a non-empty batch".into()));
    }
    net.check_params(params)?;
    let units = net.config.head_outputs();
    for (x, y) in batch {
        net.check_input(x)?;
        if *y as usize > units {
            return Err(QaError::Domain(format!("label {y} outside 0..={units}")));
        }
    }
    let pairs: usize = batch
        .iter()
        .map(|&(_, y)| (0..units).filter(|&j| y as usize >= j).count())
        .sum();
    let norm = 1.0 / pairs as f64;

    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let mut grad_logits = vec![0.0; units];
    for &(x, y) in batch {
        let trace = net.run(params, x, mode, rng);
        let z = trace.acts.last().expect("logits");
        for j in 0..units {
            if (y as usize) < j {
                grad_logits[j] = 0.0;
                continue;
            }
            let t = if y as usize > j { 1.0 } else { 0.0 };
            // BCE(sigmoid(z), t) = softplus(z) - t z
            total += softplus(z[j]) - t * z[j];
            grad_logits[j] = (sigmoid(z[j]) - t) * norm;
        }
        net.backward(params, &trace, &grad_logits, &mut grads);
    }
    let mut loss = total * norm;
    if weight_decay > 0.0 {
        loss += 0.5 * weight_decay * params.weight_sq_norm();
        for (g, p) in grads.layers.iter_mut().zip(&params.layers) {
            for (gw, w) in g.weight.data.iter_mut().zip(&p.weight.data) {
                *gw += weight_decay * w;
            }
        }
    }
    Ok((loss, grads))
}

/// `passes` stochastic forward passes with independent dropout masks. Pass
/// `t` draws from a stream derived from `(seed, t)`.
pub fn mc_forward(net: &Network, params: &ModelParameters, input: &[f64], passes: usize, seed: u64) -> Result<McProbs> {
    if passes == 0 {
        return Err(QaError::EmptyInput("at least one MC pass is required".into()));
    }
    if net.config.num_classes != 3 {
        return Err(QaError::Config("MC moment estimation is defined for three classes".into()));
    }
    net.check_params(params)?;
    net.check_input(input)?;
    let pairs = (0..passes as u64)
        .map(|t| {
            let mut rng = sub_rng(seed, t);
            let f = net.forward(params, input, ForwardMode::EvalStochastic, &mut rng)?;
            Ok([f[0], f[1]])
        })
        .collect::<Result<Vec<_>>>()?;
    McProbs::new(pairs)
}
