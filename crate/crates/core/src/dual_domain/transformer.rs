//! Post-norm transformer encoder and identity-guided decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, LayerNorm, Linear, MultiHeadAttention};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(prefix: &str, d_model: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(format!("{prefix}.up"), d_model, hidden),
            down: Linear::new(format!("{prefix}.down"), hidden, d_model),
        }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.up.init(store, rng);
        self.down.init(store, rng);
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.silu(h)?;
        self.down.forward(g, store, h)
    }
}

/// `norm(x + sublayer)`.
fn residual(g: &mut Graph, store: &ParamStore, norm: &LayerNorm, x: Var, y: Var) -> Result<Var> {
    let s = g.add(x, y)?;
    norm.forward(g, store, s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    input: Linear,
    layers: Vec<EncoderLayer>,
    pub d_model: usize,
}

impl Encoder {
    pub fn new(prefix: &str, in_dim: usize, d_model: usize, heads: usize, layers: usize, ff: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(&format!("{p}.attn"), d_model, heads)?,
                    norm1: LayerNorm::new(format!("{p}.norm1"), d_model),
                    ff: FeedForward::new(&format!("{p}.ff"), d_model, ff),
                    norm2: LayerNorm::new(format!("{p}.norm2"), d_model),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            input: Linear::new(format!("{prefix}.input"), in_dim, d_model),
            layers,
            d_model,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.input.init(store, rng);
        for l in &self.layers {
            l.attn.init(store, rng);
            l.norm1.init(store);
            l.ff.init(store, rng);
            l.norm2.init(store);
        }
    }

    /// `x: B×C×in_dim → B×C×d_model`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [_, c, w] = g.dims(x);
        if w != self.input.in_dim {
            return Err(Error::shape(
                "encoder",
                format!("input width {w}, expected {}", self.input.in_dim),
            ));
        }
        let h = self.input.forward(g, store, x)?;
        let pe = g.constant(positional_encoding(c, self.d_model))?;
        let mut h = g.add(h, pe)?;
        for l in &self.layers {
            let a = l.attn.forward(g, store, h, h)?;
            h = residual(g, store, &l.norm1, h, a)?;
            let f = l.ff.forward(g, store, h)?;
            h = residual(g, store, &l.norm2, h, f)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// Identity landmarks embedded and tiled into one query per frame; the
/// queries attend to themselves and to the audio memory, then project to the
/// output landmark width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    embed: Linear,
    layers: Vec<DecoderLayer>,
    pub output: Linear,
    pub d_model: usize,
}

impl Decoder {
    pub fn new(
        prefix: &str,
        identity_dim: usize,
        out_dim: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        ff: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(&format!("{p}.self"), d_model, heads)?,
                    norm1: LayerNorm::new(format!("{p}.norm1"), d_model),
                    cross_attn: MultiHeadAttention::new(&format!("{p}.cross"), d_model, heads)?,
                    norm2: LayerNorm::new(format!("{p}.norm2"), d_model),
                    ff: FeedForward::new(&format!("{p}.ff"), d_model, ff),
                    norm3: LayerNorm::new(format!("{p}.norm3"), d_model),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            embed: Linear::new(format!("{prefix}.embed"), identity_dim, d_model),
            layers,
            output: Linear::new(format!("{prefix}.out"), d_model, out_dim),
            d_model,
        })
    }

    pub fn identity_dim(&self) -> usize {
        self.embed.in_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.embed.init(store, rng);
        for l in &self.layers {
            l.self_attn.init(store, rng);
            l.norm1.init(store);
            l.cross_attn.init(store, rng);
            l.norm2.init(store);
            l.ff.init(store, rng);
            l.norm3.init(store);
        }
        self.output.init(store, rng);
    }

    /// `memory: B×C×d`, `identity: B×1×identity_dim` → `B×C×out_dim`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, memory: Var, identity: Var) -> Result<Var> {
        let [b, c, _] = g.dims(memory);
        let [bi, one, w] = g.dims(identity);
        if w != self.identity_dim() || one != 1 || bi != b {
            return Err(Error::shape(
                "decoder",
                format!(
                    "identity {:?}, expected [{b}, 1, {}]",
                    g.dims(identity),
                    self.identity_dim()
                ),
            ));
        }
        let e = self.embed.forward(g, store, identity)?;
        let pe = g.constant(positional_encoding(c, self.d_model))?;
        let mut q = g.add(e, pe)?;
        for l in &self.layers {
            let s = l.self_attn.forward(g, store, q, q)?;
            q = residual(g, store, &l.norm1, q, s)?;
            let x = l.cross_attn.forward(g, store, q, memory)?;
            q = residual(g, store, &l.norm2, q, x)?;
            let f = l.ff.forward(g, store, q)?;
            q = residual(g, store, &l.norm3, q, f)?;
        }
        self.output.forward(g, store, q)
    }
}
