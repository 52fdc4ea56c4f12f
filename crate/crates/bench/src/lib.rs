//! Shared fixtures for the criterion benchmarks.

use kfusion::audio::emotion_one_hot;
use kfusion::{ModelConfig, ModelInputs, Tensor3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A seeded batch of `batch` random clips shaped for `cfg`.
pub fn random_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> ModelInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<_> = (0..batch)
        .map(|i| ModelInputs {
            audio: Tensor3::uniform([1, cfg.frames, cfg.audio_width], -1.0, 1.0, &mut rng),
            content: Tensor3::uniform([1, cfg.frames, cfg.content_dim], -1.0, 1.0, &mut rng),
            emotion: emotion_one_hot(i % 8).expect("emotion index in range"),
            identity: Tensor3::uniform([1, 1, cfg.face_dim], 0.2, 0.8, &mut rng),
        })
        .collect();
    ModelInputs::stack(&items).expect("uniform shapes stack")
}

/// Random `B×C×F` targets in normalized landmark range.
pub fn random_target(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor3 {
    Tensor3::uniform([batch, cfg.frames, cfg.face_dim], 0.2, 0.8, &mut ChaCha8Rng::seed_from_u64(seed))
}
