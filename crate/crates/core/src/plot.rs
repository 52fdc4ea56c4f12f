//! SVG overlay of reference (blue) and predicted (red) landmarks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkFrame, LandmarkSequence};

pub const REFERENCE_COLOR: &str = "blue";
pub const PREDICTED_COLOR: &str = "red";
const RADIUS: f64 = 1.5;

fn markers(svg: &mut String, frame: &LandmarkFrame, class: &str, color: &str) {
    let _ = writeln!(svg, r#"  <g class="{class}" fill="{color}">"#);
    for p in frame.points() {
        let _ = writeln!(svg, r#"    <circle cx="{:.3}" cy="{:.3}" r="{RADIUS}"/>"#, p[0], p[1]);
    }
    svg.push_str("  </g>\n");
}

/// A `size×size` SVG with reference markers drawn first and predictions on top.
pub fn overlay_svg(pred: &LandmarkFrame, reference: &LandmarkFrame, size: f64) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"  <rect width="{size}" height="{size}" fill="white"/>"#);
    markers(&mut svg, reference, "reference", REFERENCE_COLOR);
    markers(&mut svg, pred, "predicted", PREDICTED_COLOR);
    svg.push_str("</svg>\n");
    svg
}

/// Overlay for frame `t` of two sequences, in the reference's image size.
pub fn plot_frame(pred: &LandmarkSequence, reference: &LandmarkSequence, t: usize) -> Result<String> {
    let n = pred.len().min(reference.len());
    if t >= n {
        return Err(Error::Validation(format!(
            "frame {t} out of range: prediction has {} frames, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    Ok(overlay_svg(&pred.frames[t], &reference.frames[t], reference.image_size))
}
