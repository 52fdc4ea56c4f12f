//! Audio ingestion and the two speech representations: raw non-overlapping
//! frames for the global branch, and content features (ingested from KFT1
//! files or produced by a log-mel stand-in) for the content branch.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::diffcore::{KftArray, Tensor3};
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SAMPLES: usize = 16_000;
pub const NUM_EMOTIONS: usize = 8;

/// MEAD emotion categories, indexed as on the command line.
pub const EMOTIONS: [&str; NUM_EMOTIONS] = [
    "angry",
    "disgusted",
    "contempt",
    "fear",
    "happy",
    "neutral",
    "sad",
    "surprised",
];

pub const MEL_BINS: usize = 80;
pub const MEL_WINDOW: usize = 400;
pub const MEL_HOP: usize = 320;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Self {
        AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Reads a mono 16 kHz WAV (PCM16 or float32). No resampling or downmixing.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Validation(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Validation(format!(
            "{}: expected a {SAMPLE_RATE} Hz sample rate, found {} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (fmt, bits) => {
            return Err(Error::Validation(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit (PCM16 or float32 only)",
                path.display()
            )))
        }
    }
    .map_err(|e| wav_error(path, e))?;
    Ok(AudioClip {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes PCM16 mono.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Splits the clip into `frames` non-overlapping windows of width
/// `ceil(len / frames)`, zero-padding the tail. Shape `1×frames×W`.
pub fn frame_audio(clip: &AudioClip, frames: usize) -> Result<Tensor3> {
    if clip.is_empty() {
        return Err(Error::Validation("cannot frame an empty clip".into()));
    }
    if frames == 0 {
        return Err(Error::Validation("frame count must be at least 1".into()));
    }
    let width = clip.len().div_ceil(frames);
    Ok(Tensor3::from_fn([1, frames, width], |_, c, l| {
        clip.samples.get(c * width + l).copied().unwrap_or(0.0)
    }))
}

/// Time steps × feature dims.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFeatures {
    steps: usize,
    dims: usize,
    values: Vec<f64>,
}

impl ContentFeatures {
    pub fn new(steps: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if steps == 0 || dims == 0 || values.len() != steps * dims {
            return Err(Error::Validation(format!(
                "content features {steps}x{dims} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("content features".into()));
        }
        Ok(ContentFeatures { steps, dims, values })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.dims + d]
    }

    pub fn to_kft(&self) -> KftArray {
        KftArray::from_f64(vec![self.steps, self.dims], &self.values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_kft().write(path)
    }
}

/// Reads a rank-2 KFT1 feature file.
pub fn load_features(path: impl AsRef<Path>) -> Result<ContentFeatures> {
    let path = path.as_ref();
    let arr = KftArray::read(path)?;
    if arr.rank() != 2 {
        return Err(Error::format(
            path,
            format!("content features must be rank 2, found rank {}", arr.rank()),
        ));
    }
    ContentFeatures::new(arr.dims[0], arr.dims[1], arr.to_f64())
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over `n_fft / 2 + 1` bins, 0 Hz to Nyquist.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log-mel stand-in for pretrained speech features: 80 bins, Hann window of
/// 400 samples, hop 320 (50 steps per second), natural log floored at 1e-10.
pub fn mel_stub_features(clip: &AudioClip) -> Result<ContentFeatures> {
    if clip.len() < MEL_WINDOW {
        return Err(Error::Validation(format!(
            "clip of {} samples is shorter than one {MEL_WINDOW}-sample window",
            clip.len()
        )));
    }
    let steps = 1 + (clip.len() - MEL_WINDOW) / MEL_HOP;
    let filters = mel_filterbank(MEL_BINS, MEL_WINDOW, clip.sample_rate);
    let window: Vec<f64> = (0..MEL_WINDOW)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / MEL_WINDOW as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(MEL_WINDOW);
    let bins = MEL_WINDOW / 2 + 1;
    let mut values = Vec::with_capacity(steps * MEL_BINS);
    let mut buf = vec![Complex::new(0.0, 0.0); MEL_WINDOW];
    for t in 0..steps {
        let frame = &clip.samples[t * MEL_HOP..t * MEL_HOP + MEL_WINDOW];
        for (b, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        for filt in &filters {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            values.push(e.max(LOG_FLOOR).ln());
        }
    }
    ContentFeatures::new(steps, MEL_BINS, values)
}

/// Per-step elementwise product with an emotion row of matching width.
pub fn apply_emotion(features: &ContentFeatures, row: &[f64]) -> Result<ContentFeatures> {
    if row.len() != features.dims {
        return Err(Error::Validation(format!(
            "emotion row has {} dims, features have {}",
            row.len(),
            features.dims
        )));
    }
    let values = features
        .values
        .chunks_exact(features.dims)
        .flat_map(|step| step.iter().zip(row).map(|(a, b)| a * b))
        .collect();
    ContentFeatures::new(features.steps, features.dims, values)
}

/// Learnable `8×D` emotion table; row `e` weights features of emotion `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionWeight {
    pub table: Tensor3,
}

impl EmotionWeight {
    pub fn ones(dims: usize) -> Self {
        EmotionWeight {
            table: Tensor3::full([1, NUM_EMOTIONS, dims], 1.0),
        }
    }

    pub fn row(&self, emotion: usize) -> Result<Vec<f64>> {
        check_emotion(emotion)?;
        Ok(self.table.slice(crate::diffcore::Axis::Channel, emotion, 1)?.into_data())
    }
}

pub fn check_emotion(emotion: usize) -> Result<()> {
    if emotion >= NUM_EMOTIONS {
        return Err(Error::Validation(format!(
            "emotion id {emotion} outside 0..{NUM_EMOTIONS}"
        )));
    }
    Ok(())
}

/// One-hot `1×1×8` selector for an emotion id.
pub fn emotion_one_hot(emotion: usize) -> Result<Tensor3> {
    check_emotion(emotion)?;
    Ok(Tensor3::from_fn([1, 1, NUM_EMOTIONS], |_, _, l| (l == emotion) as u8 as f64))
}

/// Linear interpolation of `T` steps onto `frames` evenly spaced points
/// spanning the same interval. Shape `1×frames×D`.
pub fn resample_time(features: &ContentFeatures, frames: usize) -> Result<Tensor3> {
    if features.steps < 2 {
        return Err(Error::Validation(format!(
            "resampling needs at least 2 time steps, got {}",
            features.steps
        )));
    }
    if frames == 0 {
        return Err(Error::Validation("frame count must be at least 1".into()));
    }
    let last = (features.steps - 1) as f64;
    let denom = frames.saturating_sub(1).max(1) as f64;
    Ok(Tensor3::from_fn([1, frames, features.dims], |_, c, d| {
        let pos = c as f64 * last / denom;
        let i0 = (pos.floor() as usize).min(features.steps - 2);
        let frac = pos - i0 as f64;
        features.at(i0, d) * (1.0 - frac) + features.at(i0 + 1, d) * frac
    }))
}
