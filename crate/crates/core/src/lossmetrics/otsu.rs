//! Global Otsu binarization.

use crate::error::{Error, Result};
use crate::imgdata::{GrayImage, LabelMask};

/// Between-class separation score for the split `{<= t}` vs `{> t}`, up to a
/// constant factor: `(N*S0 - W0*S)^2 / (W0 * W1)`.
pub fn between_class_score(w0: u64, s0: u64, total: u64, sum: u64) -> f64 {
    let w1 = total - w0;
    if w0 == 0 || w1 == 0 {
        return 0.0;
    }
    let d = total as i128 * s0 as i128 - w0 as i128 * sum as i128;
    let d = d as f64;
    d * d / (w0 as f64 * w1 as f64)
}

/// Threshold `t` maximizing between-class variance; pixels `> t` are the
/// foreground. A run of tied maxima (empty bins between the classes)
/// resolves to its midpoint.
pub fn otsu_level_from_histogram(hist: &[u64; 256]) -> Result<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateInput(
            "Otsu needs at least two distinct intensities".into(),
        ));
    }
    let total: u64 = hist.iter().sum();
    let sum: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let (mut w0, mut s0) = (0u64, 0u64);
    let (mut best, mut first, mut last) = (f64::NEG_INFINITY, 0usize, 0usize);
    for t in 0..255usize {
        w0 += hist[t];
        s0 += t as u64 * hist[t];
        let score = between_class_score(w0, s0, total, sum);
        if score > best {
            (best, first, last) = (score, t, t);
        } else if score == best {
            last = t;
        }
    }
    Ok(((first + last) / 2) as u8)
}

pub fn otsu_level(image: &GrayImage) -> Result<u8> {
    otsu_level_from_histogram(&image.histogram())
}

/// Binary mask: 1 where the intensity exceeds the Otsu threshold.
pub fn otsu_threshold(image: &GrayImage) -> Result<LabelMask> {
    let t = otsu_level(image)?;
    let labels = image.values().iter().map(|&v| u8::from(v > t)).collect();
    LabelMask::new(image.width(), image.height(), labels)
}
