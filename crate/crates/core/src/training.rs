//! Loss, Adam, the cosine schedule, corpus loading, the training loop and
//! checkpoints.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{emotion_one_hot, frame_audio, load_wav, mel_stub_features, resample_time};
use crate::diffcore::{Graph, KftArray, ParamStore, Tensor3, Var};
use crate::dual_domain::{BoundInputs, ModelConfig, ModelInputs};
use crate::error::{Error, Result};
use crate::landmarks::{
    denormalize, load_landmarks, load_landmarks_expect, normalize, LandmarkSequence, IMAGE_SIZE,
};
use crate::metrics::{full_report, mean_report, MetricReport};
use crate::model::{Ablation, Model};
use crate::synth::load_manifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Fraction of clips held out for validation.
    pub val_fraction: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr_max: 3e-4,
            lr_min: 1e-6,
            batch_size: 8,
            seed: 0,
            ablation: Ablation::Full,
            val_fraction: 0.2,
            clip_norm: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The short schedule used on the synthetic corpus: 30 epochs with a
    /// larger peak rate, since 30 epochs of 3e-4 cannot move the output layer
    /// far enough from its initialization.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            lr_max: 3e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max) {
            return bad(format!("need 0 <= lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        self.model.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/epochs))`, written as a
/// convex combination so both endpoints are exact.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs || cfg.epochs == 0 {
        return Err(Error::Validation(format!("epoch {epoch} outside [0, {}]", cfg.epochs)));
    }
    let w = 0.5 * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos());
    Ok(cfg.lr_max * w + cfg.lr_min * (1.0 - w))
}

/// Mean squared difference, as a scalar node.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.dims(pred) != g.dims(target) {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", g.dims(pred), g.dims(target)),
        ));
    }
    let d = g.sub(pred, target)?;
    g.mean_square(d)
}

pub fn mse(pred: &Tensor3, target: &Tensor3) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor3>,
    v: BTreeMap<String, Tensor3>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter that has a gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        for (name, gr) in grads.iter() {
            let p = params.get(name)?;
            if p.dims() != gr.dims() {
                return Err(Error::shape("adam", format!("{name}: gradient {:?} vs parameter {:?}", gr.dims(), p.dims())));
            }
            if !gr.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, gr) in grads.iter() {
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor3::zeros(gr.dims()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor3::zeros(gr.dims()));
            let p = params.get_mut(name)?;
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (i, &gi) in gr.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.dot(g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Gradients of a scalar node with respect to every trainable bound parameter.
pub fn param_gradients(g: &Graph, loss: Var, params: &ParamStore) -> Result<ParamStore> {
    let grads = g.backward(loss, &Tensor3::full([1, 1, 1], 1.0))?;
    let mut out = ParamStore::new();
    for (name, &v) in g.bound_params() {
        let p = params.get(name)?;
        if p.requires_grad() {
            out.insert(name.clone(), grads.get_or_zeros(v, p.dims()));
        }
    }
    Ok(out)
}

/// One clip ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub inputs: ModelInputs,
    /// Normalized landmarks, `1×C×F`.
    pub target: Tensor3,
    pub reference: LandmarkSequence,
}

/// Audio, content features, emotion and identity for one clip.
pub fn prepare_inputs(
    cfg: &ModelConfig,
    wav: &Path,
    identity: &Path,
    emotion: usize,
) -> Result<ModelInputs> {
    let clip = load_wav(wav)?;
    let audio = frame_audio(&clip, cfg.frames)?;
    if audio.features() != cfg.audio_width {
        return Err(Error::Validation(format!(
            "{}: {} samples give frames of width {}, model expects {}",
            wav.display(),
            clip.len(),
            audio.features(),
            cfg.audio_width
        )));
    }
    let content = resample_time(&mel_stub_features(&clip)?, cfg.frames)?;
    // Identity files may hold several frames; the first one is the identity.
    let mut id_seq = load_landmarks(identity)?;
    id_seq.frames.truncate(1);
    let inputs = ModelInputs {
        audio,
        content,
        emotion: emotion_one_hot(emotion)?,
        identity: normalize(&id_seq, IMAGE_SIZE)?,
    };
    inputs.check(cfg)?;
    Ok(inputs)
}

/// Loads every clip listed in the corpus manifest, in manifest order.
pub fn load_corpus(dir: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    manifest
        .clips
        .iter()
        .map(|c| {
            let [wav, lm, id] = c.paths(dir);
            let reference = load_landmarks_expect(&lm, cfg.frames)?;
            Ok(Sample {
                id: c.id.clone(),
                inputs: prepare_inputs(cfg, &wav, &id, c.emotion)?,
                target: normalize(&reference, IMAGE_SIZE)?,
                reference,
            })
        })
        .collect()
}

/// Seeded shuffle into `(train, validation)` index lists. A single clip serves
/// as both.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Per-dimension mean and inverse standard deviation of content features over
/// all frames of `samples`.
pub fn content_statistics(samples: &[&Sample]) -> Result<(Tensor3, Tensor3)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation("no samples for feature statistics".into()))?;
    let d = first.inputs.content.features();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0.0;
    for s in samples {
        for row in s.inputs.content.data().chunks(d) {
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let inv_std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| 1.0 / (q / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    Ok((Tensor3::new([1, 1, d], mean)?, Tensor3::new([1, 1, d], inv_std)?))
}

pub fn predict_batched(model: &Model, store: &ParamStore, samples: &[&Sample], batch: usize) -> Result<Vec<Tensor3>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let inputs: Vec<ModelInputs> = chunk.iter().map(|s| s.inputs.clone()).collect();
        let y = model.predict(store, &ModelInputs::stack(&inputs)?)?;
        let [_, c, f] = y.dims();
        for b in 0..chunk.len() {
            out.push(Tensor3::new([1, c, f], y.data()[b * c * f..(b + 1) * c * f].to_vec())?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub report: MetricReport,
}

/// Mean loss and mean per-clip metrics in pixel units.
pub fn evaluate(model: &Model, store: &ParamStore, samples: &[&Sample], batch: usize) -> Result<Evaluation> {
    let preds = predict_batched(model, store, samples, batch)?;
    let mut loss = 0.0;
    let mut reports = Vec::with_capacity(samples.len());
    for (p, s) in preds.iter().zip(samples) {
        loss += mse(p, &s.target)?;
        reports.push(full_report(&denormalize(p, 0, IMAGE_SIZE)?, &s.reference)?);
    }
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        report: mean_report(&reports)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss; absent for the untrained record at epoch 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub f_ld: f64,
    pub m_ld: f64,
    pub f_lvd: f64,
    pub m_lvd: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }
}

fn record(epoch: usize, lr: f64, train_loss: Option<f64>, e: &Evaluation) -> EpochRecord {
    EpochRecord {
        epoch,
        lr,
        train_loss,
        val_loss: e.loss,
        f_ld: e.report.f_ld,
        m_ld: e.report.m_ld,
        f_lvd: e.report.f_lvd,
        m_lvd: e.report.m_lvd,
    }
}

/// Builds the model for `cfg`, fits content normalization on the training
/// split, and runs minibatch Adam for `cfg.epochs` epochs. Epoch `e` (1-based)
/// uses `cosine_lr(e − 1)`. Validation runs before training (epoch 0) and after
/// each epoch. `on_epoch` sees each record as it is produced.
pub fn train(
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<(Model, TrainOutcome)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let model = Model::new(cfg.model.clone(), cfg.ablation)?;
    let mut params = model.init(cfg.seed);
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.val_fraction, cfg.seed);
    let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let (shift, scale) = content_statistics(&train_set)?;
    model.set_content_normalization(&mut params, shift, scale)?;

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let first = record(0, cosine_lr(0, cfg)?, None, &evaluate(&model, &params, &val_set, cfg.batch_size)?);
    on_epoch(&first)?;
    history.push(first);
    let mut best_epoch = 0;
    let mut best_params = params.clone();

    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0da7a);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<ModelInputs> = chunk.iter().map(|&i| train_set[i].inputs.clone()).collect();
            let targets: Vec<&Tensor3> = chunk.iter().map(|&i| &train_set[i].target).collect();
            let stacked = ModelInputs::stack(&inputs)?;
            let target = stack_targets(&targets)?;
            let mut g = Graph::new();
            let bound = BoundInputs::bind(&mut g, &stacked)?;
            let y = model.forward(&mut g, &params, &bound)?;
            let t = g.constant(target)?;
            let loss = mse_loss(&mut g, y, t)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {bi}")));
            }
            let mut grads = param_gradients(&g, loss, &params)?;
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut params, &grads, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {bi}: {e}")))?;
            total += value;
            batches += 1;
        }
        let eval = evaluate(&model, &params, &val_set, cfg.batch_size)?;
        let rec = record(epoch, lr, Some(total / batches as f64), &eval);
        on_epoch(&rec)?;
        if rec.f_ld < history[best_epoch].f_ld {
            best_epoch = epoch;
            best_params = params.clone();
        }
        history.push(rec);
    }
    Ok((
        model,
        TrainOutcome {
            params,
            best_params,
            best_epoch,
            history,
        },
    ))
}

fn stack_targets(ts: &[&Tensor3]) -> Result<Tensor3> {
    let [_, c, f] = ts[0].dims();
    let mut data = Vec::with_capacity(ts.len() * c * f);
    for t in ts {
        data.extend_from_slice(t.data());
    }
    Tensor3::new([ts.len(), c, f], data)
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub dims: [usize; 3],
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub epoch: usize,
    pub best_epoch: usize,
    pub params: Vec<ParamEntry>,
}

/// Writes `manifest.json` and one KFT1 file per parameter into `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Model,
    params: &ParamStore,
    train: &TrainConfig,
    epoch: usize,
    best_epoch: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = format!("params/{name}.kft");
        KftArray::from(t).write(dir.join(&file))?;
        entries.push(ParamEntry {
            name: name.clone(),
            file,
            dims: t.dims(),
            trainable: t.requires_grad(),
        });
    }
    let manifest = CheckpointManifest {
        model: model.config.clone(),
        ablation: model.ablation,
        train: train.clone(),
        epoch,
        best_epoch,
        params: entries,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, ParamStore, CheckpointManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let model = Model::new(manifest.model.clone(), manifest.ablation)?;
    let expected = model.init(0);
    let mut params = ParamStore::new();
    for entry in &manifest.params {
        let file = dir.join(&entry.file);
        let t = KftArray::read(&file)?.into_tensor3(&file)?;
        if t.dims() != entry.dims {
            return Err(Error::format(&file, format!("dims {:?}, manifest says {:?}", t.dims(), entry.dims)));
        }
        if entry.trainable {
            params.insert(entry.name.clone(), t);
        } else {
            params.insert_frozen(entry.name.clone(), t);
        }
    }
    for (name, t) in expected.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::format(&path, format!("missing parameter `{name}`")))?;
        if got.dims() != t.dims() {
            return Err(Error::format(&path, format!("`{name}` has dims {:?}, model needs {:?}", got.dims(), t.dims())));
        }
    }
    Ok((model, params, manifest))
}

/// Trains on the corpus in `corpus_dir`, writing `history.jsonl`, the final
/// checkpoint into `out_dir` and the best-validation checkpoint into
/// `out_dir/best`.
pub fn train_to_dir(corpus_dir: impl AsRef<Path>, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    let samples = load_corpus(corpus_dir, &cfg.model)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hist_path = out.join("history.jsonl");
    let mut hist = fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    let (model, outcome) = train(&samples, cfg, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(hist, "{line}").map_err(|e| Error::io(&hist_path, e))
    })?;
    save_checkpoint(out, &model, &outcome.params, cfg, cfg.epochs, outcome.best_epoch)?;
    save_checkpoint(out.join("best"), &model, &outcome.best_params, cfg, outcome.best_epoch, outcome.best_epoch)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f_ld: f64,
    pub f_lvd: f64,
    pub m_ld: f64,
    pub m_lvd: f64,
    pub frames: usize,
    pub clips: usize,
}

/// Metrics of a checkpoint over every clip of a corpus.
pub fn eval_checkpoint(ckpt: impl AsRef<Path>, corpus_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let (model, params, manifest) = load_checkpoint(ckpt)?;
    let samples = load_corpus(corpus_dir, &model.config)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let e = evaluate(&model, &params, &refs, manifest.train.batch_size)?;
    Ok(EvalReport {
        f_ld: e.report.f_ld,
        f_lvd: e.report.f_lvd,
        m_ld: e.report.m_ld,
        m_lvd: e.report.m_lvd,
        frames: model.config.frames,
        clips: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthSpec};
    use rand::Rng;

    #[test]
    fn cosine_endpoints_midpoint_and_monotone() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 3e-4);
        assert_eq!(cosine_lr(200, &cfg).unwrap(), 1e-6);
        assert!((cosine_lr(100, &cfg).unwrap() - 1.505e-4).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=200).map(|e| cosine_lr(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(cosine_lr(201, &cfg).is_err());
    }

    #[test]
    fn mse_cases() {
        let a = Tensor3::uniform([2, 3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &a.map(|v| v + 1.0)).unwrap(), 1.0);
        let b = Tensor3::uniform([2, 3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut naive = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    naive += (a.at(i, j, k) - b.at(i, j, k)).powi(2);
                }
            }
        }
        assert!((mse(&a, &b).unwrap() - naive / 24.0).abs() < 1e-12);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let l = mse_loss(&mut g, va, vb).unwrap();
        assert!((g.value(l).data()[0] - naive / 24.0).abs() < 1e-12);
        assert!(mse(&a, &Tensor3::zeros([2, 3, 5])).is_err());
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor3::new([1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let before = p.clone();
        let mut adam = Adam::default();
        let mut zero = ParamStore::new();
        zero.insert("w", Tensor3::zeros([1, 1, 3]));
        adam.step(&mut p, &zero, 0.1).unwrap();
        assert_eq!(p, before);

        let mut adam = Adam::default();
        let mut g = ParamStore::new();
        g.insert("w", Tensor3::new([1, 1, 3], vec![0.3, -2.0, 1e-3]).unwrap());
        adam.step(&mut p, &g, 0.01).unwrap();
        for i in 0..3 {
            let delta = p.get("w").unwrap().data()[i] - before.get("w").unwrap().data()[i];
            let gi = g.get("w").unwrap().data()[i];
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((delta - want).abs() < 1e-15, "{delta} vs {want}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_and_names_parameter() {
        let mut p = ParamStore::new();
        p.insert("layer.w", Tensor3::zeros([1, 1, 2]));
        let mut g = ParamStore::new();
        g.insert("layer.w", Tensor3::new([1, 1, 2], vec![1.0, 0.0]).unwrap());
        g.get_mut("layer.w").unwrap().data_mut()[1] = f64::NAN;
        let err = Adam::default().step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer.w"), "{err}");
        assert_eq!(p.get("layer.w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = ParamStore::new();
        g.insert("a", Tensor3::new([1, 1, 2], vec![3.0, 0.0]).unwrap());
        g.insert("b", Tensor3::new([1, 1, 1], vec![4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.get("a").unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g.get("b").unwrap().data()[0] - 0.8).abs() < 1e-15);
        let before = g.clone();
        assert!((clip_grad_norm(&mut g, 2.0) - 1.0).abs() < 1e-12);
        assert_eq!(g, before);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(64, 0.2, 3);
        assert_eq!((t.len(), v.len()), (51, 13));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert_eq!(split_indices(64, 0.2, 3), (t, v));
        assert_eq!(split_indices(1, 0.2, 3), (vec![0], vec![0]));
    }

    fn tiny_corpus(n: usize) -> (tempfile::TempDir, Vec<Sample>, TrainConfig) {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&SynthSpec { n_clips: n, ..SynthSpec::default() }, dir.path()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            model: ModelConfig {
                d_model: 16,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                ff_dim: 16,
                lstm_hidden: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let samples = load_corpus(dir.path(), &cfg.model).unwrap();
        (dir, samples, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (_d, samples, mut cfg) = tiny_corpus(3);
        cfg.lr_max = 1e-300;
        cfg.lr_min = 0.0;
        let (model, out) = train(&samples, &cfg, |_| Ok(())).unwrap();
        let mut init = model.init(cfg.seed);
        let train_refs: Vec<&Sample> = split_indices(3, 0.2, cfg.seed).0.iter().map(|&i| &samples[i]).collect();
        let (s, k) = content_statistics(&train_refs).unwrap();
        model.set_content_normalization(&mut init, s, k).unwrap();
        for (name, t) in init.iter() {
            assert!(t.max_abs_diff(out.params.get(name).unwrap()) < 1e-290, "{name}");
        }
        assert_eq!(out.history.len(), 3);
        assert!(out.history[0].train_loss.is_none());
    }

    #[test]
    fn single_sample_descent() {
        let (_d, samples, mut cfg) = tiny_corpus(1);
        cfg.lr_max = 1e-4;
        cfg.lr_min = 1e-4 * 0.999;
        let model = Model::new(cfg.model.clone(), Ablation::Full).unwrap();
        let mut params = model.init(1);
        let mut adam = Adam::default();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let mut g = Graph::new();
            let bound = BoundInputs::bind(&mut g, &samples[0].inputs).unwrap();
            let y = model.forward(&mut g, &params, &bound).unwrap();
            let t = g.constant(samples[0].target.clone()).unwrap();
            let l = mse_loss(&mut g, y, t).unwrap();
            losses.push(g.value(l).data()[0]);
            let mut grads = param_gradients(&g, l, &params).unwrap();
            clip_grad_norm(&mut grads, 1.0);
            adam.step(&mut params, &grads, cfg.lr_max).unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_round_trip() {
        let (dir, samples, cfg) = tiny_corpus(4);
        let (m1, o1) = train(&samples, &cfg, |_| Ok(())).unwrap();
        let (_, o2) = train(&samples, &cfg, |_| Ok(())).unwrap();
        assert_eq!(o1.history, o2.history);
        assert_eq!(o1.params, o2.params);

        let ck = tempfile::tempdir().unwrap();
        save_checkpoint(ck.path(), &m1, &o1.params, &cfg, 2, o1.best_epoch).unwrap();
        let (m, p, man) = load_checkpoint(ck.path()).unwrap();
        assert_eq!(m, m1);
        assert_eq!(man.epoch, 2);
        for (name, t) in o1.params.iter() {
            let back = p.get(name).unwrap();
            assert_eq!(back.requires_grad(), t.requires_grad(), "{name}");
            assert!(back.max_abs_diff(t) <= 1e-6 * t.data().iter().fold(1.0f64, |a, v| a.max(v.abs())));
        }
        let report = eval_checkpoint(ck.path(), dir.path()).unwrap();
        assert_eq!(report.clips, 4);
        assert!([report.f_ld, report.f_lvd, report.m_ld, report.m_lvd].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn every_ablation_trains() {
        let (_d, samples, mut cfg) = tiny_corpus(2);
        cfg.epochs = 1;
        for a in Ablation::ALL {
            cfg.ablation = a;
            let (_, out) = train(&samples, &cfg, |_| Ok(())).unwrap();
            assert_eq!(out.history.len(), 2, "{a}");
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TrainConfig { lr_min: 1.0, lr_max: rng.random_range(0.0..1.0), ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 30, "ablation": "no_lstm"}"#).unwrap();
        assert_eq!(parsed.epochs, 30);
        assert_eq!(parsed.ablation, Ablation::NoLstm);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 30}"#).is_err());
    }
}
