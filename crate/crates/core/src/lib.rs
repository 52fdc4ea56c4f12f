//! Audio-driven facial landmark generation with dual-domain feature
//! extraction and a KAN-based fusion head.
//!
//! The pipeline runs in double precision on a small reverse-mode tape
//! ([`diffcore`]). Speech enters twice: as raw framed audio for the global
//! branch and as emotion-weighted content features for the content branch
//! ([`dual_domain`]). The [`kfusion`] block merges both into per-frame
//! 68-point landmarks, scored with [`metrics`].

pub mod audio;
pub mod diffcore;
pub mod dual_domain;
pub mod error;
pub mod kan;
pub mod kfusion;
pub mod landmarks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod synth;
pub mod training;

pub use diffcore::{Axis, Graph, ParamStore, Tensor3, Var};
pub use dual_domain::{ModelConfig, ModelInputs};
pub use error::{Error, Result};
pub use landmarks::{LandmarkFrame, LandmarkSequence, MOUTH_POINTS, NUM_POINTS};
pub use metrics::MetricReport;
pub use model::{Ablation, Model};
pub use training::{EvalReport, TrainConfig};
