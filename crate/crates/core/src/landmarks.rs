//! 68-point landmark sequences, the mouth-region convention and JSON I/O.
//!
//! Frames flatten to 136 features in interleaved order
//! `[x0, y0, x1, y1, ..., x67, y67]`, which makes the mouth points 48..=67 the
//! contiguous flat range `96..136`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, Tensor3};
use crate::error::{Error, Result};

pub const NUM_POINTS: usize = 68;
pub const FLAT_DIM: usize = 2 * NUM_POINTS;
pub const MOUTH_POINTS: Range<usize> = 48..68;
pub const MOUTH_FLAT: Range<usize> = 96..136;
pub const MOUTH_DIM: usize = 40;
pub const DEFAULT_FPS: u32 = 30;
pub const DEFAULT_FRAMES: usize = 30;
pub const IMAGE_SIZE: f64 = 256.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    points: Vec<[f64; 2]>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_POINTS {
            return Err(Error::Validation(format!(
                "frame has {} points, expected {NUM_POINTS}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("frame contains non-finite coordinates".into()));
        }
        Ok(LandmarkFrame { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn unflatten(flat: &[f64]) -> Result<Self> {
        if flat.len() != FLAT_DIM {
            return Err(Error::Validation(format!(
                "flat frame has {} values, expected {FLAT_DIM}",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> LandmarkFrame {
        LandmarkFrame {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    pub frames: Vec<LandmarkFrame>,
    pub fps: u32,
    pub image_size: f64,
}

#[derive(Serialize, Deserialize)]
struct LandmarkFile {
    fps: u32,
    image_size: f64,
    frames: Vec<Vec<[f64; 2]>>,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<LandmarkFrame>) -> Self {
        LandmarkSequence {
            frames,
            fps: DEFAULT_FPS,
            image_size: IMAGE_SIZE,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `1×C×136` tensor of raw coordinates.
    pub fn to_tensor(&self) -> Tensor3 {
        let c = self.frames.len();
        let data = self.frames.iter().flat_map(LandmarkFrame::flatten).collect();
        Tensor3::new([1, c, FLAT_DIM], data).expect("frames are 136 wide")
    }

    /// Reads batch entry `batch` of a `B×C×136` tensor.
    pub fn from_tensor(t: &Tensor3, batch: usize, fps: u32, image_size: f64) -> Result<Self> {
        if t.features() != FLAT_DIM || batch >= t.batch() {
            return Err(Error::shape(
                "landmark sequence",
                format!("tensor {:?}, batch index {batch}", t.dims()),
            ));
        }
        let frames = (0..t.channels())
            .map(|c| {
                let row: Vec<f64> = (0..FLAT_DIM).map(|l| t.at(batch, c, l)).collect();
                LandmarkFrame::unflatten(&row)
            })
            .collect::<Result<_>>()?;
        Ok(LandmarkSequence {
            frames,
            fps,
            image_size,
        })
    }

    pub fn expect_frames(&self, n: usize) -> Result<()> {
        if self.frames.len() != n {
            return Err(Error::Validation(format!(
                "sequence has {} frames, expected {n}",
                self.frames.len()
            )));
        }
        Ok(())
    }
}

/// Feature slice `96..136` of a `B×C×136` tensor.
pub fn mouth_slice(t: &Tensor3) -> Result<Tensor3> {
    if t.features() != FLAT_DIM {
        return Err(Error::shape(
            "mouth_slice",
            format!("feature axis is {}, expected {FLAT_DIM}", t.features()),
        ));
    }
    t.slice(Axis::Feature, MOUTH_FLAT.start, MOUTH_DIM)
}

/// Coordinates divided by `image_size`, as a `1×C×136` tensor.
pub fn normalize(seq: &LandmarkSequence, image_size: f64) -> Result<Tensor3> {
    for (fi, f) in seq.frames.iter().enumerate() {
        for (pi, p) in f.points().iter().enumerate() {
            if p.iter().any(|&v| !(0.0..=image_size).contains(&v)) {
                return Err(Error::Validation(format!(
                    "frame {fi} point {pi} at ({}, {}) lies outside [0, {image_size}]",
                    p[0], p[1]
                )));
            }
        }
    }
    Ok(seq.to_tensor().map(|v| v / image_size))
}

/// Inverse of [`normalize`] for batch entry `batch`. Accepts any finite values,
/// since predictions may leave the image.
pub fn denormalize(t: &Tensor3, batch: usize, image_size: f64) -> Result<LandmarkSequence> {
    let scaled = t.map(|v| v * image_size);
    LandmarkSequence::from_tensor(&scaled, batch, DEFAULT_FPS, image_size)
}

/// Landmarks of the identity image: `v` (136 values) and its mouth part.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLandmarks {
    pub v: Vec<f64>,
}

impl IdentityLandmarks {
    /// From a pixel-space frame, normalized by `image_size`.
    pub fn from_frame(frame: &LandmarkFrame, image_size: f64) -> Self {
        IdentityLandmarks {
            v: frame.flatten().into_iter().map(|x| x / image_size).collect(),
        }
    }

    pub fn mouth(&self) -> &[f64] {
        &self.v[MOUTH_FLAT]
    }
}

pub fn save_landmarks(seq: &LandmarkSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = LandmarkFile {
        fps: seq.fps,
        image_size: seq.image_size,
        frames: seq.frames.iter().map(|f| f.points.clone()).collect(),
    };
    let text = serde_json::to_string(&file).expect("landmark file serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: LandmarkFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.frames.is_empty() {
        return Err(Error::format(path, "no frames"));
    }
    if !(file.image_size > 0.0) {
        return Err(Error::format(path, "image_size must be positive"));
    }
    let frames = file
        .frames
        .into_iter()
        .enumerate()
        .map(|(i, pts)| {
            LandmarkFrame::new(pts).map_err(|e| Error::format(path, format!("frame {i}: {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(LandmarkSequence {
        frames,
        fps: file.fps,
        image_size: file.image_size,
    })
}

/// [`load_landmarks`] plus a frame-count check.
pub fn load_landmarks_expect(path: impl AsRef<Path>, frames: usize) -> Result<LandmarkSequence> {
    let path = path.as_ref();
    let seq = load_landmarks(path)?;
    seq.expect_frames(frames)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(seq)
}
