//! Landmark distance (LD) and landmark velocity difference (LVD), over the
//! whole face and over the mouth points 48..=67. Inputs are pixel-space
//! sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSequence, MOUTH_POINTS, NUM_POINTS};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub f_ld: f64,
    pub f_lvd: f64,
    pub m_ld: f64,
    pub m_lvd: f64,
}

pub fn face_region() -> Vec<usize> {
    (0..NUM_POINTS).collect()
}

pub fn mouth_region() -> Vec<usize> {
    MOUTH_POINTS.collect()
}

fn check(pred: &LandmarkSequence, reference: &LandmarkSequence, region: &[usize]) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::Validation(format!(
            "prediction has {} frames, reference has {}",
            pred.len(),
            reference.len()
        )));
    }
    if region.is_empty() {
        return Err(Error::Validation("empty landmark region".into()));
    }
    if let Some(&bad) = region.iter().find(|&&i| i >= NUM_POINTS) {
        return Err(Error::Validation(format!("region index {bad} is not a landmark")));
    }
    Ok(())
}

/// Mean Euclidean distance over frames and region points.
pub fn landmark_distance(pred: &LandmarkSequence, reference: &LandmarkSequence, region: &[usize]) -> Result<f64> {
    check(pred, reference, region)?;
    if pred.is_empty() {
        return Err(Error::Validation("empty sequences".into()));
    }
    let mut total = 0.0;
    for (fp, fr) in pred.frames.iter().zip(&reference.frames) {
        for &i in region {
            let (p, r) = (fp.point(i), fr.point(i));
            total += (p[0] - r[0]).hypot(p[1] - r[1]);
        }
    }
    Ok(total / (pred.len() * region.len()) as f64)
}

/// Mean Euclidean distance between frame-to-frame velocities, averaged over
/// the `frames − 1` transitions and the region points.
pub fn landmark_velocity_difference(
    pred: &LandmarkSequence,
    reference: &LandmarkSequence,
    region: &[usize],
) -> Result<f64> {
    check(pred, reference, region)?;
    if pred.len() < 2 {
        return Err(Error::Validation(format!(
            "velocity needs at least 2 frames, got {}",
            pred.len()
        )));
    }
    let mut total = 0.0;
    for t in 1..pred.len() {
        for &i in region {
            let (p1, p0) = (pred.frames[t].point(i), pred.frames[t - 1].point(i));
            let (r1, r0) = (reference.frames[t].point(i), reference.frames[t - 1].point(i));
            let dvx = (p1[0] - p0[0]) - (r1[0] - r0[0]);
            let dvy = (p1[1] - p0[1]) - (r1[1] - r0[1]);
            total += dvx.hypot(dvy);
        }
    }
    Ok(total / ((pred.len() - 1) * region.len()) as f64)
}

pub fn full_report(pred: &LandmarkSequence, reference: &LandmarkSequence) -> Result<MetricReport> {
    let (face, mouth) = (face_region(), mouth_region());
    Ok(MetricReport {
        f_ld: landmark_distance(pred, reference, &face)?,
        f_lvd: landmark_velocity_difference(pred, reference, &face)?,
        m_ld: landmark_distance(pred, reference, &mouth)?,
        m_lvd: landmark_velocity_difference(pred, reference, &mouth)?,
    })
}

/// Mean of per-clip reports.
pub fn mean_report(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Validation("no clips to report on".into()));
    }
    let n = reports.len() as f64;
    let mut acc = MetricReport::default();
    for r in reports {
        acc.f_ld += r.f_ld;
        acc.f_lvd += r.f_lvd;
        acc.m_ld += r.m_ld;
        acc.m_lvd += r.m_lvd;
    }
    acc.f_ld /= n;
    acc.f_lvd /= n;
    acc.m_ld /= n;
    acc.m_lvd /= n;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::LandmarkFrame;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_with(points: &[(usize, [f64; 2])]) -> LandmarkFrame {
        let mut pts = vec![[0.0, 0.0]; NUM_POINTS];
        for &(i, p) in points {
            pts[i] = p;
        }
        LandmarkFrame::new(pts).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, frames: usize) -> LandmarkSequence {
        LandmarkSequence::new(
            (0..frames)
                .map(|_| {
                    LandmarkFrame::new(
                        (0..NUM_POINTS)
                            .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
                            .collect(),
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn hand_distance_case() {
        let pred = LandmarkSequence::new(vec![frame_with(&[(1, [3.0, 4.0])])]);
        let reference = LandmarkSequence::new(vec![frame_with(&[])]);
        assert_eq!(landmark_distance(&pred, &reference, &[0, 1]).unwrap(), 2.5);
    }

    #[test]
    fn hand_velocity_case() {
        let pred = LandmarkSequence::new(vec![frame_with(&[]), frame_with(&[(0, [1.0, 0.0])])]);
        let reference = LandmarkSequence::new(vec![frame_with(&[]), frame_with(&[])]);
        assert_eq!(landmark_velocity_difference(&pred, &reference, &[0]).unwrap(), 1.0);
    }

    #[test]
    fn identical_sequences_score_zero() {
        let s = random_seq(&mut ChaCha8Rng::seed_from_u64(1), 5);
        assert_eq!(full_report(&s, &s).unwrap(), MetricReport::default());
    }

    #[test]
    fn static_sequences_have_zero_lvd() {
        let f = random_seq(&mut ChaCha8Rng::seed_from_u64(2), 1).frames[0].clone();
        let g = random_seq(&mut ChaCha8Rng::seed_from_u64(3), 1).frames[0].clone();
        let a = LandmarkSequence::new(vec![f.clone(); 4]);
        let b = LandmarkSequence::new(vec![g; 4]);
        assert_eq!(landmark_velocity_difference(&a, &b, &face_region()).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_only_moves_ld() {
        let a = random_seq(&mut ChaCha8Rng::seed_from_u64(4), 6);
        let shifted = LandmarkSequence::new(a.frames.iter().map(|f| f.map(|p| [p[0] + 3.0, p[1] - 4.0])).collect());
        let r = full_report(&shifted, &a).unwrap();
        assert!(r.f_lvd.abs() < 1e-12 && r.m_lvd.abs() < 1e-12);
        assert!((r.f_ld - 5.0).abs() < 1e-12 && (r.m_ld - 5.0).abs() < 1e-12);
    }

    #[test]
    fn perturbation_outside_mouth() {
        let a = random_seq(&mut ChaCha8Rng::seed_from_u64(5), 3);
        let mut b = a.clone();
        let mut pts = b.frames[1].points().to_vec();
        pts[10][0] += 2.0;
        b.frames[1] = LandmarkFrame::new(pts).unwrap();
        let r = full_report(&b, &a).unwrap();
        assert_eq!(r.m_ld, 0.0);
        assert_eq!(r.m_lvd, 0.0);
        assert!(r.f_ld > 0.0 && r.f_lvd > 0.0);
    }

    #[test]
    fn errors() {
        let a = random_seq(&mut ChaCha8Rng::seed_from_u64(6), 3);
        let b = random_seq(&mut ChaCha8Rng::seed_from_u64(7), 2);
        assert!(landmark_distance(&a, &b, &face_region()).is_err());
        assert!(landmark_distance(&a, &a, &[]).is_err());
        assert!(landmark_distance(&a, &a, &[68]).is_err());
        let one = random_seq(&mut ChaCha8Rng::seed_from_u64(8), 1);
        assert!(landmark_velocity_difference(&one, &one, &[0]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_homogeneous_and_triangle(seed in 0u64..500, s in 0.1f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_seq(&mut rng, 4), random_seq(&mut rng, 4), random_seq(&mut rng, 4));
            let face = face_region();
            let ld = |x: &LandmarkSequence, y: &LandmarkSequence| landmark_distance(x, y, &face).unwrap();
            let lvd = |x: &LandmarkSequence, y: &LandmarkSequence| landmark_velocity_difference(x, y, &face).unwrap();
            prop_assert!((ld(&a, &b) - ld(&b, &a)).abs() < 1e-9);
            prop_assert!((lvd(&a, &b) - lvd(&b, &a)).abs() < 1e-9);
            prop_assert!(ld(&a, &c) <= ld(&a, &b) + ld(&b, &c) + 1e-9);
            let scale = |x: &LandmarkSequence| LandmarkSequence::new(x.frames.iter().map(|f| f.map(|p| [p[0] * s, p[1] * s])).collect());
            prop_assert!((ld(&scale(&a), &scale(&b)) - s * ld(&a, &b)).abs() < 1e-9);
            prop_assert!((lvd(&scale(&a), &scale(&b)) - s * lvd(&a, &b)).abs() < 1e-9);
            let shift = LandmarkSequence::new(a.frames.iter().map(|f| f.map(|p| [p[0] + 7.5, p[1] - 2.0])).collect());
            prop_assert!((lvd(&shift, &b) - lvd(&a, &b)).abs() < 1e-9);
        }
    }
}
