use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::QaRng;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Weights and bias of one conv or dense layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A named, contiguous run of layers sharing a learning rate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub name: String,
    /// Indices into [`ModelParameters::layers`].
    pub layers: std::ops::Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub layers: Vec<ParamLayer>,
    pub groups: Vec<LayerGroup>,
}

impl ModelParameters {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| ParamLayer {
                    weight: Tensor::zeros(l.weight.shape.clone()),
                    bias: Tensor::zeros(l.bias.shape.clone()),
                })
                .collect(),
            groups: self.groups.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every tensor in network order: (layer, is_bias, tensor).
    pub fn tensors(&self) -> impl Iterator<Item = (usize, bool, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(i, false, &l.weight), (i, true, &l.bias)])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (usize, bool, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| [(i, false, &mut l.weight), (i, true, &mut l.bias)])
    }

    pub fn group_of_layer(&self, layer: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.layers.contains(&layer))
            .expect("every layer belongs to a group")
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(|(_, _, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Round every value to the nearest `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for (_, _, t) in self.tensors_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, _, t) in self.tensors_mut() {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter())
            .map(|w| w * w)
            .sum()
    }
}

/// He-normal weights (f32-representable) and zero biases.
pub(crate) fn init_layer(weight_shape: Vec<usize>, fan_in: usize, rng: &mut QaRng) -> ParamLayer {
    let n_out = weight_shape[0];
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut weight = Tensor::zeros(weight_shape);
    for w in &mut weight.data {
        let v: f64 = normal.sample(rng);
        *w = v as f32 as f64;
    }
    // keep the stream position independent of bias layout
    let _: u32 = rng.random();
    ParamLayer {
        weight,
        bias: Tensor::zeros(vec![n_out]),
    }
}
