//! The complete audio-to-landmark network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Tensor3, Var};
use crate::dual_domain::{BoundInputs, ContentBranch, DualDomain, ModelConfig, ModelInputs};
use crate::error::{Error, Result};
use crate::kfusion::{KFusion, MeanHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoKfusion,
    NoLstm,
    NoGlobal,
    ReplMlp,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoKfusion,
        Ablation::NoLstm,
        Ablation::NoGlobal,
        Ablation::ReplMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoKfusion => "no_kfusion",
            Ablation::NoLstm => "no_lstm",
            Ablation::NoGlobal => "no_global",
            Ablation::ReplMlp => "repl_mlp",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Fusion {
    KFusion(KFusion),
    Mean(MeanHead),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    branches: DualDomain,
    fusion: Fusion,
}

impl Model {
    pub fn new(config: ModelConfig, ablation: Ablation) -> Result<Self> {
        let branches = DualDomain::new(
            &config,
            ablation != Ablation::NoGlobal,
            ablation != Ablation::NoLstm,
        )?;
        let fusion = match ablation {
            Ablation::NoKfusion => Fusion::Mean(MeanHead::new(&config)),
            a => Fusion::KFusion(KFusion::new(&config, a == Ablation::ReplMlp)?),
        };
        Ok(Model {
            config,
            ablation,
            branches,
            fusion,
        })
    }

    /// Fresh parameters drawn from a seeded generator.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.branches.init(&mut store, &mut rng);
        match &self.fusion {
            Fusion::KFusion(k) => k.init(&mut store, &mut rng),
            Fusion::Mean(m) => m.init(&mut store, &mut rng),
        }
        store
    }

    /// Sets the frozen content-feature normalization so that
    /// `(x - shift) * scale` is applied before emotion weighting.
    pub fn set_content_normalization(&self, store: &mut ParamStore, shift: Tensor3, scale: Tensor3) -> Result<()> {
        let dims = [1, 1, self.config.content_dim];
        if shift.dims() != dims || scale.dims() != dims {
            return Err(Error::shape(
                "content normalization",
                format!("{:?} and {:?}, expected {dims:?}", shift.dims(), scale.dims()),
            ));
        }
        store.insert_frozen(ContentBranch::NORM_SHIFT_KEY, shift);
        store.insert_frozen(ContentBranch::NORM_SCALE_KEY, scale);
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &BoundInputs) -> Result<Var> {
        let o = self.branches.forward(g, store, inputs)?;
        match &self.fusion {
            Fusion::KFusion(k) => k.forward(g, store, &o),
            Fusion::Mean(m) => m.forward(g, store, &o),
        }
    }

    /// Normalized landmark predictions, `B×C×F`.
    pub fn predict(&self, store: &ParamStore, inputs: &ModelInputs) -> Result<Tensor3> {
        inputs.check(&self.config)?;
        let mut g = Graph::new();
        let bound = BoundInputs::bind(&mut g, inputs)?;
        let y = self.forward(&mut g, store, &bound)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::emotion_one_hot;
    use crate::diffcore::finite_difference_check;

    fn inputs(cfg: &ModelConfig, b: usize, seed: u64) -> ModelInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<_> = (0..b)
            .map(|i| ModelInputs {
                audio: Tensor3::uniform([1, cfg.frames, cfg.audio_width], -1.0, 1.0, &mut rng),
                content: Tensor3::uniform([1, cfg.frames, cfg.content_dim], -1.0, 1.0, &mut rng),
                emotion: emotion_one_hot(i % 8).unwrap(),
                identity: Tensor3::uniform([1, 1, cfg.face_dim], 0.2, 0.8, &mut rng),
            })
            .collect();
        ModelInputs::stack(&items).unwrap()
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("none".parse::<Ablation>().is_err());
    }

    #[test]
    fn every_ablation_predicts() {
        let cfg = ModelConfig::default();
        let inp = inputs(&cfg, 2, 1);
        for a in Ablation::ALL {
            let model = Model::new(cfg.clone(), a).unwrap();
            let store = model.init(2);
            let y = model.predict(&store, &inp).unwrap();
            assert_eq!(y.dims(), [2, 30, 136], "{a}");
            assert!(y.is_finite(), "{a}");
            assert_eq!(y, model.predict(&store, &inp).unwrap());
        }
    }

    #[test]
    fn rejects_misshapen_inputs() {
        let cfg = ModelConfig::miniature();
        let model = Model::new(cfg.clone(), Ablation::Full).unwrap();
        let store = model.init(3);
        let mut inp = inputs(&cfg, 1, 4);
        inp.identity = Tensor3::zeros([1, 1, 7]);
        assert!(matches!(model.predict(&store, &inp), Err(Error::Shape { .. })));
    }

    #[test]
    fn miniature_end_to_end_gradient() {
        let cfg = ModelConfig::miniature();
        let inp = inputs(&cfg, 1, 5);
        for a in [Ablation::Full, Ablation::ReplMlp] {
            let model = Model::new(cfg.clone(), a).unwrap();
            let store = model.init(6);
            let err = finite_difference_check(
                |g: &mut Graph, s: &ParamStore| {
                    let bound = BoundInputs::bind(g, &inp)?;
                    model.forward(g, s, &bound)
                },
                &store,
                3e-4,
            )
            .unwrap();
            assert!(err < 1e-3, "{a}: relative error {err}");
        }
    }
}
