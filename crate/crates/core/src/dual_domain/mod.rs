//! The two feature-extraction branches.
//!
//! The global branch encodes raw audio frames once, passes the encoding
//! through a frame-mixing `k=1` convolution, and decodes it twice under
//! identity guidance: against the full identity frame (`gb`, width F) and
//! against its mouth slice (`gb_m`, width M).
//!
//! The content branch normalizes content features, weights them by a learned
//! per-emotion row, and feeds three heads: an encoder/decoder twin of the
//! global branch (`ct`), and two LSTMs for face (`f`) and mouth (`m`).

mod lstm;
mod transformer;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use lstm::Lstm;
pub use transformer::{Decoder, Encoder};

use crate::audio::{CLIP_SAMPLES, MEL_BINS, NUM_EMOTIONS};
use crate::diffcore::{Axis, Graph, ParamStore, Tensor3, Var};
use crate::error::{Error, Result};
use crate::kan::SplineGrid;
use crate::landmarks::{DEFAULT_FRAMES, FLAT_DIM, MOUTH_DIM};
use crate::nn::Conv;

/// How the residual path combines with the face bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Product,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Frames per clip; also the channel count of every branch output.
    pub frames: usize,
    pub face_dim: usize,
    pub mouth_dim: usize,
    /// Samples per raw audio frame.
    pub audio_width: usize,
    pub content_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub lstm_hidden: usize,
    /// Hidden widths of the KAN head between F and F. Empty means one layer.
    pub kan_hidden: Vec<usize>,
    pub grid: SplineGrid,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: DEFAULT_FRAMES,
            face_dim: FLAT_DIM,
            mouth_dim: MOUTH_DIM,
            audio_width: CLIP_SAMPLES.div_ceil(DEFAULT_FRAMES),
            content_dim: MEL_BINS,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 128,
            lstm_hidden: 64,
            kan_hidden: Vec::new(),
            grid: SplineGrid::default(),
            fusion: FusionMode::Product,
        }
    }
}

impl ModelConfig {
    /// The reduced configuration used for end-to-end gradient checks.
    pub fn miniature() -> Self {
        ModelConfig {
            frames: 4,
            face_dim: 8,
            mouth_dim: 4,
            audio_width: 6,
            content_dim: 5,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 8,
            lstm_hidden: 3,
            kan_hidden: Vec::new(),
            grid: SplineGrid::default(),
            fusion: FusionMode::Product,
        }
    }

    /// The mouth occupies the last `mouth_dim` features of the face vector.
    pub fn mouth_offset(&self) -> usize {
        self.face_dim - self.mouth_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.mouth_dim == 0 || self.mouth_dim > self.face_dim {
            return bad(format!("mouth width {} vs face width {}", self.mouth_dim, self.face_dim));
        }
        if [self.frames, self.audio_width, self.content_dim, self.lstm_hidden, self.ff_dim]
            .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        self.grid.validate()
    }
}

/// Per-batch model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    /// Raw audio frames, `B×C×W`.
    pub audio: Tensor3,
    /// Content features resampled to the frame rate, `B×C×D`, before
    /// normalization and emotion weighting.
    pub content: Tensor3,
    /// One-hot emotion selector, `B×1×8`.
    pub emotion: Tensor3,
    /// Normalized identity landmarks, `B×1×F`.
    pub identity: Tensor3,
}

impl ModelInputs {
    pub fn batch(&self) -> usize {
        self.audio.batch()
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let b = self.batch();
        let expect = [
            ("audio", &self.audio, [b, cfg.frames, cfg.audio_width]),
            ("content", &self.content, [b, cfg.frames, cfg.content_dim]),
            ("emotion", &self.emotion, [b, 1, NUM_EMOTIONS]),
            ("identity", &self.identity, [b, 1, cfg.face_dim]),
        ];
        for (name, t, dims) in expect {
            if t.dims() != dims {
                return Err(Error::shape(
                    "model inputs",
                    format!("{name} has dims {:?}, expected {dims:?}", t.dims()),
                ));
            }
        }
        Ok(())
    }

    /// Stacks single-clip inputs along the batch axis.
    pub fn stack(items: &[ModelInputs]) -> Result<ModelInputs> {
        fn cat(ts: Vec<&Tensor3>) -> Result<Tensor3> {
            let [_, c, l] = ts[0].dims();
            let mut data = Vec::with_capacity(ts.len() * c * l);
            for t in &ts {
                if t.dims()[1..] != [c, l] {
                    return Err(Error::shape("stack", format!("{:?} vs [_, {c}, {l}]", t.dims())));
                }
                data.extend_from_slice(t.data());
            }
            let b = data.len() / (c * l).max(1);
            Tensor3::new([b, c, l], data)
        }
        if items.is_empty() {
            return Err(Error::Validation("cannot stack an empty batch".into()));
        }
        Ok(ModelInputs {
            audio: cat(items.iter().map(|i| &i.audio).collect())?,
            content: cat(items.iter().map(|i| &i.content).collect())?,
            emotion: cat(items.iter().map(|i| &i.emotion).collect())?,
            identity: cat(items.iter().map(|i| &i.identity).collect())?,
        })
    }
}

/// Inputs bound as constants on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    pub audio: Var,
    pub content: Var,
    pub emotion: Var,
    pub identity: Var,
}

impl BoundInputs {
    pub fn bind(g: &mut Graph, inputs: &ModelInputs) -> Result<Self> {
        Ok(BoundInputs {
            audio: g.constant(inputs.audio.clone())?,
            content: g.constant(inputs.content.clone())?,
            emotion: g.constant(inputs.emotion.clone())?,
            identity: g.constant(inputs.identity.clone())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBranch {
    pub encoder: Encoder,
    pub conv: Conv,
    pub face_decoder: Decoder,
    pub mouth_decoder: Decoder,
    mouth_offset: usize,
    mouth_dim: usize,
}

impl GlobalBranch {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(GlobalBranch {
            encoder: Encoder::new("global.enc", cfg.audio_width, cfg.d_model, cfg.heads, cfg.enc_layers, cfg.ff_dim)?,
            conv: Conv::new("global.conv", cfg.frames, cfg.frames, 1),
            face_decoder: Decoder::new(
                "global.dec_face",
                cfg.face_dim,
                cfg.face_dim,
                cfg.d_model,
                cfg.heads,
                cfg.dec_layers,
                cfg.ff_dim,
            )?,
            mouth_decoder: Decoder::new(
                "global.dec_mouth",
                cfg.mouth_dim,
                cfg.mouth_dim,
                cfg.d_model,
                cfg.heads,
                cfg.dec_layers,
                cfg.ff_dim,
            )?,
            mouth_offset: cfg.mouth_offset(),
            mouth_dim: cfg.mouth_dim,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.encoder.init(store, rng);
        self.conv.init(store, rng);
        self.face_decoder.init(store, rng);
        self.mouth_decoder.init(store, rng);
    }

    /// `(gb, gb_m)`: `B×C×F` and `B×C×M`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, audio: Var, identity: Var) -> Result<(Var, Var)> {
        let enc = self.encoder.forward(g, store, audio)?;
        let memory = self.conv.forward(g, store, enc)?;
        let v_m = g.slice(identity, Axis::Feature, self.mouth_offset, self.mouth_dim)?;
        let gb = self.face_decoder.forward(g, store, memory, identity)?;
        let gb_m = self.mouth_decoder.forward(g, store, memory, v_m)?;
        Ok((gb, gb_m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentBranch {
    pub encoder: Encoder,
    pub conv: Conv,
    pub decoder: Decoder,
    pub lstm_face: Lstm,
    pub lstm_mouth: Lstm,
    content_dim: usize,
}

impl ContentBranch {
    pub const EMOTION_KEY: &'static str = "content.emotion";
    pub const NORM_SHIFT_KEY: &'static str = "content.norm_shift";
    pub const NORM_SCALE_KEY: &'static str = "content.norm_scale";

    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(ContentBranch {
            encoder: Encoder::new("content.enc", cfg.content_dim, cfg.d_model, cfg.heads, cfg.enc_layers, cfg.ff_dim)?,
            conv: Conv::new("content.conv", cfg.frames, cfg.frames, 1),
            decoder: Decoder::new(
                "content.dec",
                cfg.face_dim,
                cfg.face_dim,
                cfg.d_model,
                cfg.heads,
                cfg.dec_layers,
                cfg.ff_dim,
            )?,
            lstm_face: Lstm::new("content.lstm_face", cfg.content_dim, cfg.lstm_hidden, cfg.face_dim),
            lstm_mouth: Lstm::new("content.lstm_mouth", cfg.content_dim, cfg.lstm_hidden, cfg.mouth_dim),
            content_dim: cfg.content_dim,
        })
    }

    /// Registers weights. The emotion table starts at all ones, so emotion
    /// weighting begins as the identity; normalization starts as the identity
    /// and is frozen.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R, with_lstm: bool) {
        let d = self.content_dim;
        store.insert(Self::EMOTION_KEY, Tensor3::full([1, NUM_EMOTIONS, d], 1.0));
        store.insert_frozen(Self::NORM_SHIFT_KEY, Tensor3::zeros([1, 1, d]));
        store.insert_frozen(Self::NORM_SCALE_KEY, Tensor3::full([1, 1, d], 1.0));
        self.encoder.init(store, rng);
        self.conv.init(store, rng);
        self.decoder.init(store, rng);
        if with_lstm {
            self.lstm_face.init(store, rng);
            self.lstm_mouth.init(store, rng);
        }
    }

    /// Normalized, emotion-weighted features `x'`, `B×C×D`.
    pub fn weighted_features(&self, g: &mut Graph, store: &ParamStore, content: Var, emotion: Var) -> Result<Var> {
        let shift = g.param(store, Self::NORM_SHIFT_KEY)?;
        let scale = g.param(store, Self::NORM_SCALE_KEY)?;
        let table = g.param(store, Self::EMOTION_KEY)?;
        let centered = g.sub(content, shift)?;
        let x = g.mul(centered, scale)?;
        let w = g.matmul(emotion, table)?;
        g.mul(x, w)
    }

    /// `ct` from the encoder/decoder head.
    pub fn context(&self, g: &mut Graph, store: &ParamStore, x: Var, identity: Var) -> Result<Var> {
        let enc = self.encoder.forward(g, store, x)?;
        let memory = self.conv.forward(g, store, enc)?;
        self.decoder.forward(g, store, memory, identity)
    }
}

/// The five tensors handed to the fusion block.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutputs {
    pub gb: Var,
    pub gb_m: Var,
    pub ct: Var,
    pub f: Var,
    pub m: Var,
}

/// Both branches, with optional removal of the global branch or the LSTMs.
/// A removed branch contributes zeros of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualDomain {
    pub global: GlobalBranch,
    pub content: ContentBranch,
    pub use_global: bool,
    pub use_lstm: bool,
    frames: usize,
    face_dim: usize,
    mouth_dim: usize,
}

impl DualDomain {
    pub fn new(cfg: &ModelConfig, use_global: bool, use_lstm: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(DualDomain {
            global: GlobalBranch::new(cfg)?,
            content: ContentBranch::new(cfg)?,
            use_global,
            use_lstm,
            frames: cfg.frames,
            face_dim: cfg.face_dim,
            mouth_dim: cfg.mouth_dim,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        if self.use_global {
            self.global.init(store, rng);
        }
        self.content.init(store, rng, self.use_lstm);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &BoundInputs) -> Result<BranchOutputs> {
        let b = g.dims(inputs.audio)[0];
        let zeros = |g: &mut Graph, w: usize| g.constant(Tensor3::zeros([b, self.frames, w]));
        let (gb, gb_m) = if self.use_global {
            self.global.forward(g, store, inputs.audio, inputs.identity)?
        } else {
            (zeros(g, self.face_dim)?, zeros(g, self.mouth_dim)?)
        };
        let x = self.content.weighted_features(g, store, inputs.content, inputs.emotion)?;
        let ct = self.content.context(g, store, x, inputs.identity)?;
        let (f, m) = if self.use_lstm {
            (
                self.content.lstm_face.forward(g, store, x)?,
                self.content.lstm_mouth.forward(g, store, x)?,
            )
        } else {
            (zeros(g, self.face_dim)?, zeros(g, self.mouth_dim)?)
        };
        Ok(BranchOutputs { gb, gb_m, ct, f, m })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::emotion_one_hot;
    use crate::diffcore::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(cfg: &ModelConfig, b: usize, seed: u64) -> ModelInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<ModelInputs> = (0..b)
            .map(|i| ModelInputs {
                audio: Tensor3::uniform([1, cfg.frames, cfg.audio_width], -1.0, 1.0, &mut rng),
                content: Tensor3::uniform([1, cfg.frames, cfg.content_dim], -1.0, 1.0, &mut rng),
                emotion: emotion_one_hot(i % 8).unwrap(),
                identity: Tensor3::uniform([1, 1, cfg.face_dim], 0.2, 0.8, &mut rng),
            })
            .collect();
        ModelInputs::stack(&items).unwrap()
    }

    fn run(dd: &DualDomain, store: &ParamStore, inp: &ModelInputs) -> [Tensor3; 5] {
        let mut g = Graph::new();
        let bound = BoundInputs::bind(&mut g, inp).unwrap();
        let o = dd.forward(&mut g, store, &bound).unwrap();
        [o.gb, o.gb_m, o.ct, o.f, o.m].map(|v| g.value(v).clone())
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let cfg = ModelConfig::default();
        let enc = Encoder::new("e", 534, 64, 4, 2, 128).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor3::uniform([2, cfg.frames, 534], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let eval = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = enc.forward(&mut g, &store, xv).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (eval(), eval());
        assert_eq!(a.dims(), [2, 30, 64]);
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_gradient_miniature() {
        let enc = Encoder::new("e", 5, 4, 1, 1, 6).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        enc.init(&mut store, &mut rng);
        store.insert("x", Tensor3::uniform([1, 3, 5], -1.0, 1.0, &mut rng));
        let err = finite_difference_check(
            |g: &mut Graph, s: &ParamStore| {
                let x = g.param(s, "x")?;
                enc.forward(g, s, x)
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn zero_decoder_projection_gives_zero() {
        let dec = Decoder::new("d", 10, 10, 8, 2, 1, 8).unwrap();
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        dec.output.init_zeros(&mut store);
        let mut g = Graph::new();
        let mem = g.constant(Tensor3::zeros([2, 4, 8])).unwrap();
        let id = g.constant(Tensor3::zeros([2, 1, 10])).unwrap();
        let y = dec.forward(&mut g, &store, mem, id).unwrap();
        assert_eq!(g.dims(y), [2, 4, 10]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let wrong = g.constant(Tensor3::zeros([2, 1, 9])).unwrap();
        assert!(dec.forward(&mut g, &store, mem, wrong).is_err());
    }

    #[test]
    fn branch_shapes_for_each_batch_size() {
        let cfg = ModelConfig::default();
        let dd = DualDomain::new(&cfg, true, true).unwrap();
        let mut store = ParamStore::new();
        dd.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        for b in [1, 2, 4] {
            let out = run(&dd, &store, &inputs(&cfg, b, 5));
            let dims: Vec<[usize; 3]> = out.iter().map(Tensor3::dims).collect();
            assert_eq!(dims, vec![[b, 30, 136], [b, 30, 40], [b, 30, 136], [b, 30, 136], [b, 30, 40]]);
            assert!(out.iter().all(Tensor3::is_finite));
        }
    }

    #[test]
    fn batch_equivariance_and_determinism() {
        let cfg = ModelConfig::miniature();
        let dd = DualDomain::new(&cfg, true, true).unwrap();
        let mut store = ParamStore::new();
        dd.init(&mut store, &mut ChaCha8Rng::seed_from_u64(6));
        let inp = inputs(&cfg, 3, 7);
        let a = run(&dd, &store, &inp);
        assert_eq!(a, run(&dd, &store, &inp));
        let perm = [2, 0, 1];
        let pick = |t: &Tensor3, b: usize| t.slice(Axis::Channel, 0, t.channels()).map(|t| {
            Tensor3::from_fn([1, t.channels(), t.features()], |_, c, l| t.at(b, c, l))
        }).unwrap();
        let items: Vec<ModelInputs> = perm
            .iter()
            .map(|&b| ModelInputs {
                audio: pick(&inp.audio, b),
                content: pick(&inp.content, b),
                emotion: pick(&inp.emotion, b),
                identity: pick(&inp.identity, b),
            })
            .collect();
        let p = run(&dd, &store, &ModelInputs::stack(&items).unwrap());
        for (orig, permuted) in a.iter().zip(&p) {
            for (new_b, &old_b) in perm.iter().enumerate() {
                for c in 0..orig.channels() {
                    for l in 0..orig.features() {
                        assert!((orig.at(old_b, c, l) - permuted.at(new_b, c, l)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_content_with_zero_projections() {
        let cfg = ModelConfig::miniature();
        let dd = DualDomain::new(&cfg, true, true).unwrap();
        let mut store = ParamStore::new();
        dd.init(&mut store, &mut ChaCha8Rng::seed_from_u64(8));
        dd.content.decoder.output.init_zeros(&mut store);
        dd.content.lstm_face.proj.init_zeros(&mut store);
        dd.content.lstm_mouth.proj.init_zeros(&mut store);
        let mut inp = inputs(&cfg, 2, 9);
        inp.content = Tensor3::zeros(inp.content.dims());
        let out = run(&dd, &store, &inp);
        for t in &out[2..] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ablated_branches_are_zero() {
        let cfg = ModelConfig::miniature();
        let dd = DualDomain::new(&cfg, false, false).unwrap();
        let mut store = ParamStore::new();
        dd.init(&mut store, &mut ChaCha8Rng::seed_from_u64(10));
        assert!(!store.contains("content.lstm_face.w_ih"));
        let out = run(&dd, &store, &inputs(&cfg, 2, 11));
        for i in [0, 1, 3, 4] {
            assert!(out[i].data().iter().all(|&v| v == 0.0));
        }
        assert!(out[2].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn global_branch_gradient_miniature() {
        let cfg = ModelConfig::miniature();
        let gbr = GlobalBranch::new(&cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        gbr.init(&mut store, &mut rng);
        store.insert_frozen("audio", Tensor3::uniform([1, 4, 6], -1.0, 1.0, &mut rng));
        store.insert_frozen("id", Tensor3::uniform([1, 1, 8], 0.0, 1.0, &mut rng));
        let err = finite_difference_check(
            |g: &mut Graph, s: &ParamStore| {
                let a = g.param(s, "audio")?;
                let id = g.param(s, "id")?;
                let (gb, gbm) = gbr.forward(g, s, a, id)?;
                let gbm_wide = g.concat(&[gbm, gbm], Axis::Feature)?;
                g.mul(gb, gbm_wide)
            },
            &store,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
