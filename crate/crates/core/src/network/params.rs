use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Grads, Graph, Tensor, Var};

/// Index of a tensor in a [`ParamStore`]; doubles as its id on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order. Names are hierarchical,
/// dot-separated paths such as `unet.down.0.res.0.conv1.w`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor<f32>>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<f32>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), &**v))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<f32>) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                cur.shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Places the parameter on the tape.
    pub fn var<'g>(&self, g: &'g Graph<f32>, id: ParamId) -> Var<'g, f32> {
        g.param(id.0, self.values[id.0].clone())
    }
}

/// Registers freshly initialized parameters.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform `±gain/√fan_in`, the usual default for conv and linear layers.
    fn uniform(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<f32> {
        let bound = gain / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound) as f32)
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, gain: f64) -> Conv {
        let fan_in = c_in * k * k;
        let w = self.uniform(&[c_out, c_in, k, k], fan_in, gain);
        let b = self.uniform(&[c_out], fan_in, gain);
        Conv {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), b),
            pad: k / 2,
            stride: 1,
        }
    }

    /// Linear layer; `bias` overrides the random bias with a constant.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, gain: f64, bias: Option<Vec<f32>>) -> Linear {
        let w = self.uniform(&[d_out, d_in], d_in, gain);
        let b = match bias {
            Some(v) => Tensor::new(&[d_out], v).expect("bias length"),
            None => self.uniform(&[d_out], d_in, gain),
        };
        Linear { w: self.store.add(format!("{name}.w"), w), b: self.store.add(format!("{name}.b"), b) }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
    pub stride: usize,
}

impl Conv {
    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn forward<'g>(&self, p: &ParamStore, x: Var<'g, f32>) -> Var<'g, f32> {
        let g = x.graph();
        x.conv2d(p.var(g, self.w), Some(p.var(g, self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<'g>(&self, p: &ParamStore, x: Var<'g, f32>) -> Var<'g, f32> {
        let g = x.graph();
        x.linear(p.var(g, self.w), Some(p.var(g, self.b)))
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub(crate) m: Vec<Tensor<f32>>,
    pub(crate) v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads<f32>) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = c.lr as f32;
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        let (s1, s2) = ((1.0 / bc1) as f32, (1.0 / bc2) as f32);
        let eps = c.eps as f32;
        for (i, grad) in grads.iter() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.value_mut(ParamId(i));
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let upd = (*m * s1) / ((*v * s2).sqrt() + eps);
                *w = *w * decay - lr * upd;
            }
        }
    }
}
