//! The survival vision transformer: patchify, embed, encode, fuse age, classify.
//!
//! Parameters live in [`ModelParams`], an ordered table of named tensors. A
//! forward pass binds them to a [`Tape`](crate::tensor::Tape) so the same code
//! serves inference, training and finite-difference checks.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Tensor, TensorError};
use crate::volume::Dims;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, read_osvt_tensors,
    save_checkpoint, CheckpointError, TensorEntry, OSVT_MAGIC, OSVT_VERSION,
};
pub use forward::{
    bind_params, forward, forward_patches, infer_logits, patchify, volumes_to_input, BoundParams,
    Trace,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dims: Dims,
    pub patch_dims: Dims,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    /// Age in years is divided by this before joining the class token.
    pub age_scale_divisor: f32,
    pub dropout: f64,
    /// LayerNorm over the encoder output before the class token is read out.
    #[serde(default = "default_true")]
    pub final_norm: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: Dims::new(50, 64, 64),
            patch_dims: Dims::new(5, 8, 8),
            embed_dim: 192,
            num_layers: 2,
            num_heads: 12,
            head_dim: 16,
            mlp_dim: 1536,
            num_classes: 3,
            age_scale_divisor: 10.0,
            dropout: 0.0,
            final_norm: true,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        let names = ["depth", "height", "width"];
        for (axis, (i, p)) in self
            .input_dims
            .as_array()
            .into_iter()
            .zip(self.patch_dims.as_array())
            .enumerate()
        {
            if p == 0 || i == 0 {
                return err(format!("{} extent must be positive", names[axis]));
            }
            if i % p != 0 {
                return err(format!(
                    "{} axis: input extent {i} is not divisible by patch extent {p}",
                    names[axis]
                ));
            }
        }
        if self.num_heads * self.head_dim != self.embed_dim {
            return err(format!(
                "num_heads·head_dim = {}·{} must equal embed_dim {}",
                self.num_heads, self.head_dim, self.embed_dim
            ));
        }
        if self.embed_dim == 0 || self.mlp_dim == 0 || self.num_classes < 2 {
            return err("embed_dim and mlp_dim must be positive and num_classes at least 2".into());
        }
        if !(self.age_scale_divisor.is_finite() && self.age_scale_divisor > 0.0) {
            return err(format!(
                "age_scale_divisor {} must be positive",
                self.age_scale_divisor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return err("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> [usize; 3] {
        let i = self.input_dims.as_array();
        let p = self.patch_dims.as_array();
        [i[0] / p[0], i[1] / p[1], i[2] / p[2]]
    }

    pub fn num_patches(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_volume(&self) -> usize {
        self.patch_dims.voxels()
    }

    /// Names of top-level fields whose values differ, with both values.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let (a, b) = (
            serde_json::to_value(self).expect("config serializes"),
            serde_json::to_value(other).expect("config serializes"),
        );
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} vs {}", b.get(k).cloned().unwrap_or_default()))
            .collect()
    }

    /// Every parameter in canonical order with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, m, c) = (self.embed_dim, self.mlp_dim, self.num_classes);
        let mut out = vec![
            (
                "patch_embed.weight".to_string(),
                vec![e, self.patch_volume()],
            ),
            ("patch_embed.bias".into(), vec![e]),
            ("cls_token".into(), vec![1, e]),
            ("pos_embed".into(), vec![self.num_patches() + 1, e]),
        ];
        for i in 0..self.num_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("ln1.gamma"), vec![e]));
            out.push((p("ln1.beta"), vec![e]));
            for proj in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![e, e]));
                out.push((p(&format!("attn.{proj}.bias")), vec![e]));
            }
            out.push((p("ln2.gamma"), vec![e]));
            out.push((p("ln2.beta"), vec![e]));
            out.push((p("mlp.fc1.weight"), vec![e, m]));
            out.push((p("mlp.fc1.bias"), vec![m]));
            out.push((p("mlp.fc2.weight"), vec![m, e]));
            out.push((p("mlp.fc2.bias"), vec![e]));
        }
        if self.final_norm {
            out.push(("final_norm.gamma".into(), vec![e]));
            out.push(("final_norm.beta".into(), vec![e]));
        }
        out.push(("head.norm.gamma".into(), vec![e + 1]));
        out.push(("head.norm.beta".into(), vec![e + 1]));
        out.push(("head.fc.weight".into(), vec![e + 1, c]));
        out.push(("head.fc.bias".into(), vec![c]));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named model tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ModelParams<T> {
    /// Builds a table from tensors that must match `config` name-for-name and shape-for-shape.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let expected = config.param_shapes();
        if expected.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "tensor `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            tensors: config
                .param_shapes()
                .into_iter()
                .map(|(n, s)| {
                    let t = Tensor::zeros(&s);
                    (n, t)
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn into_tensors(self) -> Vec<(String, Tensor<T>)> {
        self.tensors
    }

    /// Bitwise equality of every value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| {
                    na == nb
                        && a.shape() == b.shape()
                        && a.data().iter().zip(b.data()).all(|(x, y)| {
                            Element::to_f64(*x).to_bits() == Element::to_f64(*y).to_bits()
                        })
                })
    }
}

fn is_layer_norm(name: &str) -> bool {
    name.contains("ln1.")
        || name.contains("ln2.")
        || name.starts_with("final_norm.")
        || name.starts_with("head.norm.")
}

/// Seeded initialisation: truncated normal (σ 0.02, cut at ±2σ) for weights,
/// class token and positions; LayerNorm γ = 1, β = 0; other biases 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    config.validate()?;
    const STD: f32 = 0.02;
    let normal = Normal::new(0.0f32, STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = if is_layer_norm(&name) {
                if name.ends_with("gamma") {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                }
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| loop {
                    let x = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * STD {
                        break x;
                    }
                })
            };
            (name, t)
        })
        .collect();
    Ok(ModelParams { tensors })
}

#[cfg(test)]
mod tests;
