//! Parameterized building blocks on top of the tape: linear maps, feature-axis
//! convolutions, affine layer norm, multi-head attention and small MLPs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, Graph, ParamStore, Tensor3, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

pub fn xavier_uniform<R: Rng + ?Sized>(dims: [usize; 3], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor3 {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor3::uniform(dims, -a, a, rng)
}

/// `n×n` orthogonal matrix from Gram–Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

/// Sinusoidal position table, `1×len×d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor3 {
    Tensor3::from_fn([1, len, d], |_, pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `y = x·W + b` over the feature axis. `W: 1×in×out`, `b: 1×1×out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            self.weight_key(),
            xavier_uniform([1, self.in_dim, self.out_dim], self.in_dim, self.out_dim, rng),
        );
        store.insert(self.bias_key(), Tensor3::zeros([1, 1, self.out_dim]));
    }

    pub fn init_zeros(&self, store: &mut ParamStore) {
        store.insert(self.weight_key(), Tensor3::zeros([1, self.in_dim, self.out_dim]));
        store.insert(self.bias_key(), Tensor3::zeros([1, 1, self.out_dim]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_key())?;
        let b = g.param(store, &self.bias_key())?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Convolution along the feature axis mixing `in_ch` channels into `out_ch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv {
            prefix: prefix.into(),
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let k = self.kernel;
        store.insert(
            self.weight_key(),
            xavier_uniform([self.out_ch, self.in_ch, k], self.in_ch * k, self.out_ch * k, rng),
        );
        store.insert(self.bias_key(), Tensor3::zeros([1, self.out_ch, 1]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.dims(x)[1] != self.in_ch {
            return Err(Error::shape(
                "conv",
                format!("{}: {} input channels, expected {}", self.prefix, g.dims(x)[1], self.in_ch),
            ));
        }
        let w = g.param(store, &self.weight_key())?;
        let b = g.param(store, &self.bias_key())?;
        let y = g.conv1d(x, w)?;
        g.add(y, b)
    }
}

/// Layer norm over the feature axis with learned gain and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gain", self.prefix), Tensor3::full([1, 1, self.dim], 1.0));
        store.insert(format!("{}.shift", self.prefix), Tensor3::zeros([1, 1, self.dim]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, &format!("{}.gain", self.prefix))?;
        let shift = g.param(store, &format!("{}.shift", self.prefix))?;
        let n = g.layer_norm(x, LN_EPS)?;
        let y = g.mul(n, gain)?;
        g.add(y, shift)
    }
}

/// Scaled dot-product attention with `heads` heads over `d_model` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            q: Linear::new(format!("{prefix}.q"), d_model, d_model),
            k: Linear::new(format!("{prefix}.k"), d_model, d_model),
            v: Linear::new(format!("{prefix}.v"), d_model, d_model),
            out: Linear::new(format!("{prefix}.o"), d_model, d_model),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng);
        }
    }

    /// `query: B×Cq×d` attends over `context: B×Ck×d`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let d = g.dims(q)[2];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, Axis::Feature, h * dh, dh)?;
            let kh = g.slice(k, Axis::Feature, h * dh, dh)?;
            let vh = g.slice(v, Axis::Feature, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, Axis::Feature)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, Axis::Feature)?
        };
        self.out.forward(g, store, merged)
    }
}

/// Linear layers with SiLU between consecutive layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>) -> Self {
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.silu(h)?;
            }
            h = l.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor3) -> Result<Tensor3> {
        let mut g = Graph::new();
        let v = g.constant(x.clone())?;
        let y = self.forward(&mut g, store, v)?;
        Ok(g.value(y).clone())
    }
}
