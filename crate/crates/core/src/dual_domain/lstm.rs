use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, Graph, ParamStore, Tensor3, Var};
use crate::error::{Error, Result};
use crate::nn::{orthogonal, xavier_uniform, Linear};

/// Single-layer LSTM over the channel (time) axis followed by a per-step
/// projection. Gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub prefix: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub proj: Linear,
}

impl Lstm {
    pub fn new(prefix: impl Into<String>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let prefix = prefix.into();
        Lstm {
            proj: Linear::new(format!("{prefix}.proj"), hidden, out_dim),
            prefix,
            in_dim,
            hidden,
        }
    }

    pub fn w_ih_key(&self) -> String {
        format!("{}.w_ih", self.prefix)
    }

    pub fn w_hh_key(&self) -> String {
        format!("{}.w_hh", self.prefix)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    /// Xavier input weights, orthogonal recurrent blocks, forget bias 1. The
    /// output projection starts at zero, so a fresh LSTM contributes nothing.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.hidden;
        store.insert(self.w_ih_key(), xavier_uniform([1, self.in_dim, 4 * h], self.in_dim, h, rng));
        let mut w_hh = Tensor3::zeros([1, h, 4 * h]);
        for gate in 0..4 {
            let q = orthogonal(h, rng);
            for (i, row) in q.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    w_hh.set(0, i, gate * h + j, v);
                }
            }
        }
        store.insert(self.w_hh_key(), w_hh);
        store.insert(
            self.bias_key(),
            Tensor3::from_fn([1, 1, 4 * h], |_, _, l| if (h..2 * h).contains(&l) { 1.0 } else { 0.0 }),
        );
        self.proj.init_zeros(store);
    }

    /// Hidden states `B×C×hidden` from a zero initial state.
    pub fn hidden_states(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let [b, c, d] = g.dims(seq);
        if d != self.in_dim {
            return Err(Error::shape(
                "lstm",
                format!("{}: input width {d}, expected {}", self.prefix, self.in_dim),
            ));
        }
        let h = self.hidden;
        let w_ih = g.param(store, &self.w_ih_key())?;
        let w_hh = g.param(store, &self.w_hh_key())?;
        let bias = g.param(store, &self.bias_key())?;
        let mut hs = Vec::with_capacity(c);
        let mut state_h = g.constant(Tensor3::zeros([b, 1, h]))?;
        let mut state_c = g.constant(Tensor3::zeros([b, 1, h]))?;
        for t in 0..c {
            let xt = g.slice(seq, Axis::Channel, t, 1)?;
            let zx = g.matmul(xt, w_ih)?;
            let zh = g.matmul(state_h, w_hh)?;
            let z = g.add(zx, zh)?;
            let z = g.add(z, bias)?;
            let i = g.slice(z, Axis::Feature, 0, h)?;
            let i = g.sigmoid(i)?;
            let f = g.slice(z, Axis::Feature, h, h)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice(z, Axis::Feature, 2 * h, h)?;
            let cand = g.tanh(cand)?;
            let o = g.slice(z, Axis::Feature, 3 * h, h)?;
            let o = g.sigmoid(o)?;
            let keep = g.mul(f, state_c)?;
            let write = g.mul(i, cand)?;
            state_c = g.add(keep, write)?;
            let squashed = g.tanh(state_c)?;
            state_h = g.mul(o, squashed)?;
            hs.push(state_h);
        }
        g.concat(&hs, Axis::Channel)
    }

    /// `seq: B×C×in_dim → B×C×out_dim`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let hs = self.hidden_states(g, store, seq)?;
        self.proj.forward(g, store, hs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_outputs() {
        let lstm = Lstm::new("l", 3, 4, 2);
        let mut store = ParamStore::new();
        store.insert(lstm.w_ih_key(), Tensor3::zeros([1, 3, 16]));
        store.insert(lstm.w_hh_key(), Tensor3::zeros([1, 4, 16]));
        store.insert(lstm.bias_key(), Tensor3::zeros([1, 1, 16]));
        lstm.proj.init_zeros(&mut store);
        let x = Tensor3::uniform([2, 5, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let hs = lstm.hidden_states(&mut g, &store, xv).unwrap();
        assert!(g.value(hs).data().iter().all(|&v| v == 0.0));
        let y = lstm.proj.forward(&mut g, &store, hs).unwrap();
        assert_eq!(g.dims(y), [2, 5, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        // Input and recurrent weights zero; forget bias +10, input gate shut
        // (-10), output gate open (+10), so h_t ≈ tanh(c_t) and c_t ≈ σ(10)·c_{t-1}.
        // Starting from zero, seed the cell through a first step with the
        // input gate open.
        let h = 2;
        let lstm = Lstm::new("l", 1, h, 1);
        let mut store = ParamStore::new();
        store.insert(lstm.w_ih_key(), Tensor3::from_fn([1, 1, 4 * h], |_, _, l| {
            // Input drives the input gate and the candidate.
            if l < h { 20.0 } else if (2 * h..3 * h).contains(&l) { 1.0 } else { 0.0 }
        }));
        store.insert(lstm.w_hh_key(), Tensor3::zeros([1, h, 4 * h]));
        store.insert(lstm.bias_key(), Tensor3::from_fn([1, 1, 4 * h], |_, _, l| match l / h {
            0 => -10.0,
            1 => 10.0,
            2 => 0.0,
            _ => 10.0,
        }));
        lstm.proj.init_zeros(&mut store);
        // Step 0: x = 1 opens the input gate (σ(10)), writes tanh(1). Step 1: x = 0.
        let x = Tensor3::new([1, 2, 1], vec![1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let hs = lstm.hidden_states(&mut g, &store, xv).unwrap();
        let s10 = 1.0 / (1.0 + (-10.0f64).exp());
        let c0 = s10 * 1f64.tanh();
        let c1 = s10 * c0 + (1.0 / (1.0 + 10f64.exp())) * 0.0;
        assert!((c1 - c0).abs() < 1e-4);
        let want_h1 = s10 * c1.tanh();
        assert!((g.value(hs).at(0, 1, 0) - want_h1).abs() < 1e-12);
    }

    #[test]
    fn gradients_through_five_steps() {
        let lstm = Lstm::new("l", 3, 4, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        lstm.init(&mut store, &mut rng);
        store.insert("x", Tensor3::uniform([2, 5, 3], -1.0, 1.0, &mut rng));
        let err = finite_difference_check(
            |g: &mut Graph, s: &ParamStore| {
                let x = g.param(s, "x")?;
                lstm.forward(g, s, x)
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
