//! Synthetic talking-face corpus with a known audio-to-mouth mapping.
//!
//! Each clip is one second of audio: two tones under a shared envelope
//! `e(τ) = sin²(π·r·τ + φ)`. The landmarks are the face template whose lips
//! part by `gap = amplitude · emotion_gain · e(t/fps)`, plus a small rigid
//! sway that the audio does not explain.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{save_wav, AudioClip, CLIP_SAMPLES, NUM_EMOTIONS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::landmarks::{
    save_landmarks, LandmarkFrame, LandmarkSequence, DEFAULT_FPS, DEFAULT_FRAMES, NUM_POINTS,
};

/// Mouth amplitude multiplier per emotion index.
pub const EMOTION_GAIN: [f64; NUM_EMOTIONS] = [1.3, 0.8, 0.7, 1.1, 1.2, 1.0, 0.6, 1.5];

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub seed: u64,
    /// Lip gap in pixels at full envelope, before the emotion gain.
    pub mouth_amplitude: f64,
    /// Envelope rate `r` range.
    pub envelope_rate: [f64; 2],
    pub low_tone_hz: [f64; 2],
    pub high_tone_hz: [f64; 2],
    pub sway_amplitude: [f64; 2],
    pub sway_hz: [f64; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_clips: 64,
            seed: 7,
            mouth_amplitude: 16.0,
            envelope_rate: [1.0, 3.0],
            low_tone_hz: [150.0, 400.0],
            high_tone_hz: [600.0, 1600.0],
            sway_amplitude: [0.0, 1.5],
            sway_hz: [0.3, 1.0],
        }
    }
}

/// The 68-point neutral face, centered in the 256×256 image.
pub fn template() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(NUM_POINTS);
    // Jaw, left ear to right ear through the chin.
    for i in 0..17 {
        let th = PI * (1.0 - i as f64 / 16.0);
        pts.push([128.0 + 70.0 * th.cos(), 110.0 + 85.0 * th.sin()]);
    }
    // Brows.
    for side in [78.0, 138.0] {
        for i in 0..5 {
            let u = i as f64 / 4.0;
            pts.push([side + 40.0 * u, 88.0 - 6.0 * (PI * u).sin()]);
        }
    }
    // Nose bridge, then nostrils.
    for i in 0..4 {
        pts.push([128.0, 100.0 + 10.0 * i as f64]);
    }
    for i in 0..5 {
        pts.push([114.0 + 7.0 * i as f64, 138.0 + 3.0 * (1.0 - ((i as f64 - 2.0) / 2.0).powi(2))]);
    }
    // Eyes.
    for cx in [98.0, 158.0] {
        for i in 0..6 {
            let th = PI - i as f64 * PI / 3.0;
            pts.push([cx + 12.0 * th.cos(), 105.0 - 5.0 * th.sin()]);
        }
    }
    // Outer lip from the left corner over the top, then inner lip.
    for i in 0..12 {
        let th = PI - i as f64 * PI / 6.0;
        pts.push([128.0 + 26.0 * th.cos(), 162.0 - 10.0 * th.sin()]);
    }
    for i in 0..8 {
        let th = PI - i as f64 * PI / 4.0;
        pts.push([128.0 + 16.0 * th.cos(), 162.0 - 4.0 * th.sin()]);
    }
    pts
}

/// +1 for lower-lip points, −1 for upper-lip points, 0 elsewhere.
pub fn lip_side(point: usize) -> f64 {
    match point {
        49..=53 | 61..=63 => -1.0,
        55..=59 | 65..=67 => 1.0,
        _ => 0.0,
    }
}

/// Everything that determines one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub emotion: usize,
    pub mouth_amplitude: f64,
    pub envelope_rate: f64,
    pub envelope_phase: f64,
    pub tones_hz: [f64; 2],
    pub tone_phases: [f64; 2],
    pub sway_amplitude: f64,
    pub sway_hz: f64,
    pub sway_phase: f64,
}

impl ClipParams {
    pub fn draw(spec: &SynthSpec, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64);
        let mut within = |r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..r[1]) } else { r[0] };
        let envelope_rate = within(spec.envelope_rate);
        let envelope_phase = within([0.0, PI]);
        let tones_hz = [within(spec.low_tone_hz), within(spec.high_tone_hz)];
        let tone_phases = [within([0.0, 2.0 * PI]), within([0.0, 2.0 * PI])];
        let sway_amplitude = within(spec.sway_amplitude);
        let sway_hz = within(spec.sway_hz);
        let sway_phase = within([0.0, 2.0 * PI]);
        let emotion = rng.random_range(0..NUM_EMOTIONS);
        ClipParams {
            emotion,
            mouth_amplitude: spec.mouth_amplitude,
            envelope_rate,
            envelope_phase,
            tones_hz,
            tone_phases,
            sway_amplitude,
            sway_hz,
            sway_phase,
        }
    }

    /// Envelope at time `tau` seconds, in `[0, 1]`.
    pub fn envelope(&self, tau: f64) -> f64 {
        (PI * self.envelope_rate * tau + self.envelope_phase).sin().powi(2)
    }

    /// Vertical lip gap added at time `tau`.
    pub fn mouth_gap(&self, tau: f64) -> f64 {
        self.mouth_amplitude * EMOTION_GAIN[self.emotion] * self.envelope(tau)
    }

    /// The neutral face every clip starts from.
    pub fn identity(&self) -> LandmarkFrame {
        LandmarkFrame::new(template()).expect("template has 68 finite points")
    }

    pub fn sway(&self, tau: f64) -> [f64; 2] {
        let th = 2.0 * PI * self.sway_hz * tau + self.sway_phase;
        [self.sway_amplitude * th.sin(), 0.5 * self.sway_amplitude * th.cos()]
    }

    pub fn audio(&self) -> AudioClip {
        let sr = SAMPLE_RATE as f64;
        let samples = (0..CLIP_SAMPLES)
            .map(|n| {
                let tau = n as f64 / sr;
                let low = (2.0 * PI * self.tones_hz[0] * tau + self.tone_phases[0]).sin();
                let high = (2.0 * PI * self.tones_hz[1] * tau + self.tone_phases[1]).sin();
                self.envelope(tau) * (0.5 * low + 0.3 * high)
            })
            .collect();
        AudioClip::new(samples)
    }

    pub fn landmarks(&self) -> LandmarkSequence {
        let base = self.identity();
        let frames = (0..DEFAULT_FRAMES)
            .map(|t| {
                let tau = t as f64 / DEFAULT_FPS as f64;
                let half_gap = 0.5 * self.mouth_gap(tau);
                let [sx, sy] = self.sway(tau);
                let pts = base
                    .points()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| [p[0] + sx, p[1] + sy + lip_side(i) * half_gap])
                    .collect();
                LandmarkFrame::new(pts).expect("finite landmarks")
            })
            .collect();
        LandmarkSequence::new(frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub audio: AudioClip,
    pub landmarks: LandmarkSequence,
    pub identity: LandmarkFrame,
    pub emotion: usize,
}

pub fn generate_clip(spec: &SynthSpec, index: usize) -> Result<SynthClip> {
    if index >= spec.n_clips {
        return Err(Error::Validation(format!(
            "clip index {index} out of range for {} clips",
            spec.n_clips
        )));
    }
    let p = ClipParams::draw(spec, index);
    Ok(SynthClip {
        audio: p.audio(),
        landmarks: p.landmarks(),
        identity: p.identity(),
        emotion: p.emotion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub wav: String,
    pub landmarks: String,
    pub identity: String,
    pub emotion: usize,
    pub wav_sha256: String,
    pub landmarks_sha256: String,
    pub identity_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: SynthSpec,
    pub clips: Vec<ClipEntry>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes every clip and then `manifest.json` into `out_dir`.
pub fn generate_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let dir = out_dir.as_ref();
    if spec.n_clips == 0 {
        return Err(Error::Validation("corpus needs at least one clip".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clips = Vec::with_capacity(spec.n_clips);
    for index in 0..spec.n_clips {
        let clip = generate_clip(spec, index)?;
        let id = format!("clip_{index:03}");
        let wav = format!("{id}.wav");
        let landmarks = format!("{id}.json");
        let identity = format!("{id}_identity.json");
        save_wav(&clip.audio, dir.join(&wav))?;
        save_landmarks(&clip.landmarks, dir.join(&landmarks))?;
        save_landmarks(&LandmarkSequence::new(vec![clip.identity]), dir.join(&identity))?;
        clips.push(ClipEntry {
            wav_sha256: sha256_file(&dir.join(&wav))?,
            landmarks_sha256: sha256_file(&dir.join(&landmarks))?,
            identity_sha256: sha256_file(&dir.join(&identity))?,
            id,
            wav,
            landmarks,
            identity,
            emotion: clip.emotion,
        });
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        clips,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.clips.is_empty() {
        return Err(Error::format(&path, "corpus lists no clips"));
    }
    if let Some(c) = manifest.clips.iter().find(|c| c.emotion >= NUM_EMOTIONS) {
        return Err(Error::format(&path, format!("{}: emotion {} out of range", c.id, c.emotion)));
    }
    Ok(manifest)
}

impl ClipEntry {
    pub fn paths(&self, dir: &Path) -> [PathBuf; 3] {
        [dir.join(&self.wav), dir.join(&self.landmarks), dir.join(&self.identity)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::load_wav;
    use crate::landmarks::{load_landmarks_expect, IMAGE_SIZE};
    use proptest::prelude::*;

    #[test]
    fn template_is_a_face_in_frame() {
        let t = template();
        assert_eq!(t.len(), NUM_POINTS);
        assert!(t.iter().all(|p| p.iter().all(|&v| (0.0..=IMAGE_SIZE).contains(&v))));
        // Chin is the lowest jaw point, mouth corners are level.
        assert!(t[8][1] > t[57][1]);
        assert!((t[48][1] - t[54][1]).abs() < 1e-12);
        assert!(t[51][1] < t[57][1]);
    }

    #[test]
    fn zero_envelope_leaves_mouth_at_template() {
        let mut p = ClipParams::draw(&SynthSpec::default(), 3);
        p.mouth_amplitude = 0.0;
        p.sway_amplitude = 0.0;
        let id = p.identity();
        for f in &p.landmarks().frames {
            for i in 48..68 {
                assert_eq!(f.point(i), id.point(i));
            }
        }
    }

    #[test]
    fn gap_tracks_closed_form() {
        let p = ClipParams::draw(&SynthSpec::default(), 5);
        let seq = p.landmarks();
        let base_gap = p.identity().point(57)[1] - p.identity().point(51)[1];
        let gaps: Vec<f64> = seq.frames.iter().map(|f| f.point(57)[1] - f.point(51)[1] - base_gap).collect();
        for (t, g) in gaps.iter().enumerate() {
            let tau = t as f64 / 30.0;
            assert!((g - p.mouth_gap(tau)).abs() < 1e-9);
        }
        let peak = (0..30).max_by(|&a, &b| p.envelope(a as f64 / 30.0).total_cmp(&p.envelope(b as f64 / 30.0))).unwrap();
        let widest = (0..30).max_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap();
        assert_eq!(peak, widest);
    }

    #[test]
    fn clips_are_deterministic_and_distinct() {
        let spec = SynthSpec::default();
        let a = generate_clip(&spec, 9).unwrap();
        assert_eq!(a, generate_clip(&spec, 9).unwrap());
        assert_ne!(a.audio, generate_clip(&spec, 10).unwrap().audio);
        assert_eq!(a.audio.len(), CLIP_SAMPLES);
        assert_eq!(a.landmarks.len(), DEFAULT_FRAMES);
        assert!(generate_clip(&spec, 64).is_err());
    }

    #[test]
    fn corpus_files_checksums_and_validation() {
        let spec = SynthSpec { n_clips: 4, ..SynthSpec::default() };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = generate_corpus(&spec, d1.path()).unwrap();
        let m2 = generate_corpus(&spec, d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(load_manifest(d1.path()).unwrap(), m1);
        let count = |ext: &str| {
            fs::read_dir(d1.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == ext).count()
        };
        assert_eq!(count("wav"), 4);
        assert_eq!(count("json"), 4 * 2 + 1);
        for c in &m1.clips {
            let [wav, lm, id] = c.paths(d1.path());
            assert_eq!(load_wav(&wav).unwrap().len(), CLIP_SAMPLES);
            load_landmarks_expect(&lm, DEFAULT_FRAMES).unwrap();
            load_landmarks_expect(&id, 1).unwrap();
            assert_eq!(sha256_file(&wav).unwrap(), c.wav_sha256);
        }
    }

    proptest! {
        #[test]
        fn clips_stay_in_range(seed in 0u64..10_000, index in 0usize..64) {
            let spec = SynthSpec { seed, ..SynthSpec::default() };
            let p = ClipParams::draw(&spec, index);
            let audio = p.audio();
            prop_assert!(audio.samples.iter().all(|s| s.abs() <= 1.0));
            for f in &p.landmarks().frames {
                prop_assert!(f.points().iter().all(|q| q.iter().all(|&v| (0.0..=IMAGE_SIZE).contains(&v))));
            }
            // Envelope and gap are exactly proportional.
            let k = p.mouth_amplitude * EMOTION_GAIN[p.emotion];
            for t in 0..30 {
                let tau = t as f64 / 30.0;
                prop_assert!((p.mouth_gap(tau) - k * p.envelope(tau)).abs() < 1e-12);
            }
        }
    }
}
