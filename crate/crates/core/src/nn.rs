//! Named parameter storage, the layers built on top of it, and AdamW.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `N(0, gain^2 / fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Identity,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn init<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal { fan_in, gain } => {
                let std = gain / libm::sqrt(fan_in.max(1) as f64);
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
            }
            Init::Identity => {
                let (r, c) = (shape[0], shape[shape.len() - 1]);
                Tensor::from_fn(shape, |i| if i / c == i % c && i / c < r { 1.0 } else { 0.0 })
            }
        };
        self.register(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites every parameter from `other`, which must carry the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        let lookup: BTreeMap<&str, &Tensor> = other.iter().collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    left: t.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            *t = (*src).clone();
        }
        if other.len() != self.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: expected {}, got {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// Puts every parameter on the graph; trainable leaves receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients per parameter, zero-filled where a parameter was unused.
    pub fn collect_grads(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Affine map on the last axis: `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.init(&format!("{name}.weight"), &[in_dim, out_dim], init, rng);
        let bias = bias.then(|| store.init(&format!("{name}.bias"), &[1, out_dim], Init::Zeros, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Accepts any tensor whose last axis is `in_dim`; leading axes are preserved.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let rows = g.value(x).rows();
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.in_dim]) };
        let mut y = g.matmul(flat, p.var(self.weight));
        if let Some(b) = self.bias {
            y = g.add_row(y, p.var(b));
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.out_dim;
            g.reshape(y, &out_shape)
        }
    }
}

/// Square-kernel convolution on `[H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let init = if gain == 0.0 {
            Init::Zeros
        } else {
            Init::Normal { fan_in: cin * kernel * kernel, gain }
        };
        let weight = store.init(&format!("{name}.weight"), &[kernel, kernel, cin, cout], init, rng);
        let bias = store.init(&format!("{name}.bias"), &[1, cout], Init::Zeros, rng);
        Self { weight, bias, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Per-channel affine for layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, eps: f64, rng: &mut R) -> Self {
        let gamma = store.init(&format!("{name}.gamma"), &[1, dim], Init::Ones, rng);
        let beta = store.init(&format!("{name}.beta"), &[1, dim], Init::Zeros, rng);
        Self { gamma, beta, eps }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Adam with decoupled weight decay. Moment buffers are part of the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let c = self.config;
        if c.lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (((p, g), m), v) in store.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= c.lr * (mhat / (libm::sqrt(vhat) + c.eps) + c.weight_decay * *pv);
            }
        }
    }
}
