//! Kolmogorov–Arnold network layers.
//!
//! Every edge `(j, i)` of a layer carries its own univariate function
//!
//! ```text
//! φ_ji(x) = w_b·silu(x) + w_s·Σ_q c_q·B_q(x)
//! ```
//!
//! and output node `j` is the plain sum of its incoming edges. A network is a
//! composition of such layers. Parameters live in a [`ParamStore`] under
//! `<prefix>.coef` (`m×n×(G+k)`), `<prefix>.base_w` and `<prefix>.spline_w`
//! (both `1×m×n`).

mod spline;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use spline::SplineGrid;

use crate::diffcore::{silu, Graph, ParamStore, Tensor3, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};

/// Parameters of a single edge function.
#[derive(Debug, Clone, PartialEq)]
pub struct KanEdge {
    pub coef: Vec<f64>,
    pub base_weight: f64,
    pub spline_weight: f64,
}

/// `w_b·silu(x) + w_s·Σ c_q B_q(x)`.
pub fn edge_eval(x: f64, edge: &KanEdge, grid: &SplineGrid) -> f64 {
    let basis = grid.basis(x);
    let spline: f64 = edge.coef.iter().zip(&basis).map(|(c, b)| c * b).sum();
    edge.base_weight * silu(x) + edge.spline_weight * spline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
}

impl KanLayer {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize, grid: SplineGrid) -> Self {
        KanLayer {
            prefix: prefix.into(),
            in_dim,
            out_dim,
            grid,
        }
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Registers parameters: small-noise coefficients, unit base and spline
    /// weights.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let nb = self.grid.num_basis();
        let std = 0.1 / (nb as f64).sqrt();
        store.insert(self.key("coef"), Tensor3::normal([self.out_dim, self.in_dim, nb], std, rng));
        store.insert(self.key("base_w"), Tensor3::full([1, self.out_dim, self.in_dim], 1.0));
        store.insert(self.key("spline_w"), Tensor3::full([1, self.out_dim, self.in_dim], 1.0));
    }

    /// Registers all-zero parameters.
    pub fn init_zeros(&self, store: &mut ParamStore) {
        let nb = self.grid.num_basis();
        store.insert(self.key("coef"), Tensor3::zeros([self.out_dim, self.in_dim, nb]));
        store.insert(self.key("base_w"), Tensor3::zeros([1, self.out_dim, self.in_dim]));
        store.insert(self.key("spline_w"), Tensor3::zeros([1, self.out_dim, self.in_dim]));
    }

    pub fn edge(&self, store: &ParamStore, out: usize, input: usize) -> Result<KanEdge> {
        if out >= self.out_dim || input >= self.in_dim {
            return Err(Error::Validation(format!(
                "edge ({out}, {input}) outside {}x{} layer",
                self.out_dim, self.in_dim
            )));
        }
        let nb = self.grid.num_basis();
        let e = out * self.in_dim + input;
        let coef = store.get(&self.key("coef"))?.data()[e * nb..(e + 1) * nb].to_vec();
        Ok(KanEdge {
            coef,
            base_weight: store.get(&self.key("base_w"))?.data()[e],
            spline_weight: store.get(&self.key("spline_w"))?.data()[e],
        })
    }

    /// Plain evaluation of one input vector, edge by edge.
    pub fn forward_values(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::shape(
                "kan layer",
                format!("input length {} vs in_dim {}", x.len(), self.in_dim),
            ));
        }
        (0..self.out_dim)
            .map(|j| {
                let mut acc = 0.0;
                for (i, &xi) in x.iter().enumerate() {
                    acc += edge_eval(xi, &self.edge(store, j, i)?, &self.grid);
                }
                Ok(acc)
            })
            .collect()
    }

    /// Applies the layer along the feature axis of `x: B×C×in_dim`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let coef = g.param(store, &self.key("coef"))?;
        let base = g.param(store, &self.key("base_w"))?;
        let spline = g.param(store, &self.key("spline_w"))?;
        g.kan(x, coef, base, spline, &self.grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanNetwork {
    pub layers: Vec<KanLayer>,
}

impl KanNetwork {
    /// `widths = [n0, n1, ..., nL]` gives `L` layers `n_l → n_{l+1}`.
    pub fn new(prefix: &str, widths: &[usize], grid: SplineGrid) -> Result<Self> {
        grid.validate()?;
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Validation(format!("invalid KAN widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| KanLayer::new(format!("{prefix}.{l}"), w[0], w[1], grid.clone()))
            .collect();
        Ok(KanNetwork { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for layer in &self.layers {
            layer.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.dims(x)[2] != self.in_dim() {
            return Err(Error::shape(
                "kan network",
                format!("feature width {} vs in_dim {}", g.dims(x)[2], self.in_dim()),
            ));
        }
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(g, store, h))
    }

    /// Convenience evaluation outside of a training graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor3) -> Result<Tensor3> {
        let mut g = Graph::new();
        let v = g.constant(x.clone())?;
        let out = self.forward(&mut g, store, v)?;
        Ok(g.value(out).clone())
    }
}

/// Linear-SiLU-linear stack with the same `in → out` contract as a KAN head.
pub fn mlp_substitute(prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Mlp {
    Mlp::new(vec![
        Linear::new(format!("{prefix}.0"), in_dim, hidden),
        Linear::new(format!("{prefix}.1"), hidden, out_dim),
    ])
}
