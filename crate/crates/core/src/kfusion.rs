//! Fusion of the five branch outputs into a per-frame landmark prediction.
//!
//! Mouth tensors `m ⊕ gb_m` and face tensors `f ⊕ gb ⊕ ct` are concatenated on
//! the channel axis, squeezed back to C channels by bottleneck blocks, the
//! mouth result is written into the mouth columns of the face result, and a
//! KAN head maps each frame to F outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, Graph, ParamStore, Var};
use crate::dual_domain::{BranchOutputs, FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::kan::{mlp_substitute, KanNetwork};
use crate::nn::{Conv, Linear, Mlp};

/// `(x_m, x_f) = (m ⊕ gb_m, f ⊕ gb ⊕ ct)` along channels.
pub fn fuse_concat(g: &mut Graph, m: Var, gb_m: Var, f: Var, gb: Var, ct: Var) -> Result<(Var, Var)> {
    let check = |g: &Graph, group: &[(&str, Var)]| -> Result<()> {
        let (_, first) = group[0];
        let want = g.dims(first);
        for &(name, v) in group {
            let d = g.dims(v);
            if d[0] != want[0] || d[2] != want[2] {
                return Err(Error::shape("fuse_concat", format!("{name} has dims {d:?}, expected [{}, _, {}]", want[0], want[2])));
            }
        }
        Ok(())
    };
    check(g, &[("m", m), ("gb_m", gb_m)])?;
    check(g, &[("f", f), ("gb", gb), ("ct", ct)])?;
    let x_m = g.concat(&[m, gb_m], Axis::Channel)?;
    let x_f = g.concat(&[f, gb, ct], Axis::Channel)?;
    Ok((x_m, x_f))
}

/// conv k=1 → SiLU → conv k=3 → SiLU → conv k=1, ending at `out_ch` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bottleneck {
    pub reduce: Conv,
    pub mix: Conv,
    pub expand: Conv,
}

impl Bottleneck {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize) -> Self {
        Bottleneck {
            reduce: Conv::new(format!("{prefix}.reduce"), in_ch, out_ch, 1),
            mix: Conv::new(format!("{prefix}.mix"), out_ch, out_ch, 3),
            expand: Conv::new(format!("{prefix}.expand"), out_ch, out_ch, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.reduce.init(store, rng);
        self.mix.init(store, rng);
        self.expand.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, store, x)?;
        let h = g.silu(h)?;
        let h = self.mix.forward(g, store, h)?;
        let h = g.silu(h)?;
        self.expand.forward(g, store, h)
    }
}

/// Overwrites feature columns `[offset, offset + M)` of `x_f` with `x_m`.
pub fn insert_mouth(g: &mut Graph, x_f: Var, x_m: Var, offset: usize) -> Result<Var> {
    let (df, dm) = (g.dims(x_f), g.dims(x_m));
    if df[..2] != dm[..2] || offset + dm[2] > df[2] {
        return Err(Error::shape(
            "insert_mouth",
            format!("cannot place {dm:?} into {df:?} at feature {offset}"),
        ));
    }
    g.slice_write(x_f, x_m, Axis::Feature, offset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Kan(KanNetwork),
    Mlp(Mlp),
}

impl Head {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            Head::Kan(k) => k.init(store, rng),
            Head::Mlp(m) => m.init(store, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Head::Kan(k) => k.forward(g, store, x),
            Head::Mlp(m) => m.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFusion {
    pub bottleneck_m: Bottleneck,
    pub bottleneck_f: Bottleneck,
    pub residual: Conv,
    pub head: Head,
    pub mode: FusionMode,
    mouth_offset: usize,
}

impl KFusion {
    pub fn new(cfg: &ModelConfig, mlp_head: bool) -> Result<Self> {
        let c = cfg.frames;
        let f = cfg.face_dim;
        let head = if mlp_head {
            Head::Mlp(mlp_substitute("fusion.head", f, f, f))
        } else {
            let mut widths = vec![f];
            widths.extend(&cfg.kan_hidden);
            widths.push(f);
            Head::Kan(KanNetwork::new("fusion.head", &widths, cfg.grid.clone())?)
        };
        Ok(KFusion {
            bottleneck_m: Bottleneck::new("fusion.bottleneck_m", 2 * c, c),
            bottleneck_f: Bottleneck::new("fusion.bottleneck_f", 3 * c, c),
            residual: Conv::new("fusion.residual", 3 * c, c, 1),
            head,
            mode: cfg.fusion,
            mouth_offset: cfg.mouth_offset(),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.bottleneck_m.init(store, rng);
        self.bottleneck_f.init(store, rng);
        self.residual.init(store, rng);
        self.head.init(store, rng);
    }

    /// `x'_f = B_f(x_f) ⊙ R(x_f)`, or `B_f(x_f) + R(x_f)` in sum mode.
    pub fn fuse_face(&self, g: &mut Graph, store: &ParamStore, x_f: Var) -> Result<Var> {
        let b = self.bottleneck_f.forward(g, store, x_f)?;
        let r = self.residual.forward(g, store, x_f)?;
        match self.mode {
            FusionMode::Product => g.mul(b, r),
            FusionMode::Sum => g.add(b, r),
        }
    }

    /// The fused tensor fed to the head, `B×C×F`.
    pub fn fused(&self, g: &mut Graph, store: &ParamStore, o: &BranchOutputs) -> Result<Var> {
        let (x_m, x_f) = fuse_concat(g, o.m, o.gb_m, o.f, o.gb, o.ct)?;
        let xm = self.bottleneck_m.forward(g, store, x_m)?;
        let xf = self.fuse_face(g, store, x_f)?;
        insert_mouth(g, xf, xm, self.mouth_offset)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, o: &BranchOutputs) -> Result<Var> {
        let x = self.fused(g, store, o)?;
        self.head.forward(g, store, x)
    }
}

/// Replacement for the fusion block: the mean of `f`, `gb` and `ct` followed
/// by a linear map over features. The mouth tensors are unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanHead {
    pub linear: Linear,
}

impl MeanHead {
    pub fn new(cfg: &ModelConfig) -> Self {
        MeanHead {
            linear: Linear::new("fusion.mean_head", cfg.face_dim, cfg.face_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.linear.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, o: &BranchOutputs) -> Result<Var> {
        let s = g.add(o.f, o.gb)?;
        let s = g.add(s, o.ct)?;
        let mean = g.scale(s, 1.0 / 3.0)?;
        self.linear.forward(g, store, mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_difference_check, Tensor3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(dims: [usize; 3], seed: u64) -> Tensor3 {
        Tensor3::uniform(dims, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn outputs(g: &mut Graph, b: usize, c: usize, f: usize, m: usize, seed: u64) -> BranchOutputs {
        let mut v = |dims, s| g.constant(rand_t(dims, seed * 10 + s)).unwrap();
        BranchOutputs {
            gb: v([b, c, f], 0),
            gb_m: v([b, c, m], 1),
            ct: v([b, c, f], 2),
            f: v([b, c, f], 3),
            m: v([b, c, m], 4),
        }
    }

    #[test]
    fn concat_channels_and_inverse() {
        let mut g = Graph::new();
        let o = outputs(&mut g, 2, 30, 136, 40, 1);
        let (x_m, x_f) = fuse_concat(&mut g, o.m, o.gb_m, o.f, o.gb, o.ct).unwrap();
        assert_eq!(g.dims(x_m), [2, 60, 40]);
        assert_eq!(g.dims(x_f), [2, 90, 136]);
        let back = g.value(x_f).slice(Axis::Channel, 0, 30).unwrap();
        assert_eq!(&back, g.value(o.f));
        // Naive copy oracle for the face group.
        let parts = [o.f, o.gb, o.ct].map(|v| g.value(v).clone());
        let xf = g.value(x_f);
        for b in 0..2 {
            for c in 0..90 {
                for l in 0..136 {
                    assert_eq!(xf.at(b, c, l), parts[c / 30].at(b, c % 30, l));
                }
            }
        }
    }

    #[test]
    fn concat_names_bad_operand() {
        let mut g = Graph::new();
        let o = outputs(&mut g, 1, 3, 8, 4, 2);
        let bad = g.constant(Tensor3::zeros([1, 3, 7])).unwrap();
        let err = fuse_concat(&mut g, o.m, o.gb_m, o.f, bad, o.ct).unwrap_err();
        assert!(err.to_string().contains("gb "), "{err}");
    }

    #[test]
    fn bottleneck_shapes_zero_and_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for in_ch in [60, 90] {
            let bn = Bottleneck::new("bn", in_ch, 30);
            bn.init(&mut store, &mut rng);
            let mut g = Graph::new();
            let x = g.constant(rand_t([2, in_ch, 17], 4)).unwrap();
            let y = bn.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.dims(y), [2, 30, 17]);
        }
        let bn = Bottleneck::new("z", 4, 2);
        for conv in [&bn.reduce, &bn.mix, &bn.expand] {
            store.insert(conv.weight_key(), Tensor3::zeros([conv.out_ch, conv.in_ch, conv.kernel]));
            store.insert(conv.bias_key(), Tensor3::zeros([1, conv.out_ch, 1]));
        }
        let mut g = Graph::new();
        let x = g.constant(rand_t([1, 4, 5], 5)).unwrap();
        let y = bn.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let bn = Bottleneck::new("g", 4, 2);
        bn.init(&mut store, &mut rng);
        store.insert("x", rand_t([1, 4, 5], 6));
        let err = finite_difference_check(
            |g: &mut Graph, s: &ParamStore| {
                let x = g.param(s, "x")?;
                bn.forward(g, s, x)
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    fn fusion(cfg: &ModelConfig, seed: u64) -> (KFusion, ParamStore) {
        let kf = KFusion::new(cfg, false).unwrap();
        let mut store = ParamStore::new();
        kf.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (kf, store)
    }

    fn zero_conv(store: &mut ParamStore, conv: &Conv) {
        store.insert(conv.weight_key(), Tensor3::zeros([conv.out_ch, conv.in_ch, conv.kernel]));
        store.insert(conv.bias_key(), Tensor3::zeros([1, conv.out_ch, 1]));
    }

    #[test]
    fn zero_bottleneck_absorbs_residual() {
        let (kf, mut store) = fusion(&ModelConfig::default(), 7);
        zero_conv(&mut store, &kf.bottleneck_f.expand);
        let mut g = Graph::new();
        let x = g.constant(rand_t([2, 90, 136], 8)).unwrap();
        let y = kf.fuse_face(&mut g, &store, x).unwrap();
        assert_eq!(g.dims(y), [2, 30, 136]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pass_through_residual() {
        let (kf, mut store) = fusion(&ModelConfig::default(), 9);
        // Residual copies the first C of the 3C channels (the `f` group).
        store.insert(
            kf.residual.weight_key(),
            Tensor3::from_fn([30, 90, 1], |o, i, _| if o == i { 1.0 } else { 0.0 }),
        );
        let x = rand_t([1, 90, 136], 10);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = kf.fuse_face(&mut g, &store, xv).unwrap();
        let bv = kf.bottleneck_f.forward(&mut g, &store, xv).unwrap();
        let (y, bt) = (g.value(y), g.value(bv));
        for c in 0..30 {
            for l in 0..136 {
                assert!((y.at(0, c, l) - bt.at(0, c, l) * x.at(0, c, l)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sum_mode_adds() {
        let mut cfg = ModelConfig::miniature();
        cfg.fusion = FusionMode::Sum;
        let (kf, mut store) = fusion(&cfg, 11);
        zero_conv(&mut store, &kf.bottleneck_f.expand);
        let mut g = Graph::new();
        let x = g.constant(rand_t([1, 12, 8], 12)).unwrap();
        let y = kf.fuse_face(&mut g, &store, x).unwrap();
        let r = kf.residual.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), g.value(r));
    }

    #[test]
    fn insert_mouth_gradient_reaches_both() {
        let mut store = ParamStore::new();
        store.insert("xf", rand_t([2, 3, 8], 13));
        store.insert("xm", rand_t([2, 3, 4], 14));
        let err = finite_difference_check(
            |g: &mut Graph, s: &ParamStore| {
                let (xf, xm) = (g.param(s, "xf")?, g.param(s, "xm")?);
                let y = insert_mouth(g, xf, xm, 4)?;
                g.mul(y, y)
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
        let mut g = Graph::new();
        let xf = g.constant(Tensor3::zeros([1, 3, 8])).unwrap();
        let xm = g.constant(Tensor3::zeros([1, 3, 5])).unwrap();
        assert!(insert_mouth(&mut g, xf, xm, 4).is_err());
    }

    #[test]
    fn forward_shapes_determinism_and_global_sensitivity() {
        let cfg = ModelConfig::default();
        let (kf, store) = fusion(&cfg, 15);
        let run = |zero_global: bool| {
            let mut g = Graph::new();
            let mut o = outputs(&mut g, 2, 30, 136, 40, 16);
            if zero_global {
                o.gb = g.constant(Tensor3::zeros([2, 30, 136])).unwrap();
                o.gb_m = g.constant(Tensor3::zeros([2, 30, 40])).unwrap();
            }
            let y = kf.forward(&mut g, &store, &o).unwrap();
            g.value(y).clone()
        };
        let y = run(false);
        assert_eq!(y.dims(), [2, 30, 136]);
        assert!(y.is_finite());
        assert_eq!(y, run(false));
        assert!(y.max_abs_diff(&run(true)) > 0.0);
    }

    #[test]
    fn mlp_head_and_mean_head_type_check() {
        let cfg = ModelConfig::miniature();
        let kf = KFusion::new(&cfg, true).unwrap();
        let mh = MeanHead::new(&cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        kf.init(&mut store, &mut rng);
        mh.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let o = outputs(&mut g, 2, 4, 8, 4, 18);
        let y = kf.forward(&mut g, &store, &o).unwrap();
        let z = mh.forward(&mut g, &store, &o).unwrap();
        assert_eq!(g.dims(y), [2, 4, 8]);
        assert_eq!(g.dims(z), [2, 4, 8]);
    }

    #[test]
    fn fusion_gradient_miniature() {
        for mlp in [false, true] {
            let cfg = ModelConfig::miniature();
            let kf = KFusion::new(&cfg, mlp).unwrap();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            kf.init(&mut store, &mut rng);
            let names = ["gb", "gb_m", "ct", "f", "m"];
            for (i, n) in names.iter().enumerate() {
                let w = if n.ends_with('m') { 4 } else { 8 };
                store.insert_frozen(*n, rand_t([1, 4, w], 20 + i as u64));
            }
            let err = finite_difference_check(
                |g: &mut Graph, s: &ParamStore| {
                    let o = BranchOutputs {
                        gb: g.param(s, "gb")?,
                        gb_m: g.param(s, "gb_m")?,
                        ct: g.param(s, "ct")?,
                        f: g.param(s, "f")?,
                        m: g.param(s, "m")?,
                    };
                    kf.forward(g, s, &o)
                },
                &store,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-3, "mlp={mlp}: relative error {err}");
        }
    }

    proptest! {
        #[test]
        fn insert_mouth_is_exact(seed in 0u64..1000, b in 1usize..3, c in 1usize..5) {
            let (f, m) = (12, 5);
            let xf = rand_t([b, c, f], seed);
            let xm = rand_t([b, c, m], seed + 1);
            let mut g = Graph::new();
            let (vf, vm) = (g.constant(xf.clone()).unwrap(), g.constant(xm.clone()).unwrap());
            let y = insert_mouth(&mut g, vf, vm, f - m).unwrap();
            let y = g.value(y);
            for bi in 0..b {
                for ci in 0..c {
                    for l in 0..f {
                        let want = if l >= f - m { xm.at(bi, ci, l - (f - m)) } else { xf.at(bi, ci, l) };
                        prop_assert_eq!(y.at(bi, ci, l).to_bits(), want.to_bits());
                    }
                }
            }
        }
    }
}
