//! Distances between an augmented image and its source.

use serde::{Deserialize, Serialize};

use super::{make_views, AugmentPolicy, ImageBatch};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub const PATCH: usize = 8;

fn histograms(x: &[f32], channels: usize) -> Vec<[u32; 256]> {
    let plane = x.len() / channels;
    (0..channels)
        .map(|c| {
            let mut h = [0u32; 256];
            for &v in &x[c * plane..(c + 1) * plane] {
                h[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
            }
            h
        })
        .collect()
}

/// Mean squared difference of 256-bin per-channel count histograms.
pub fn histogram_mse(x1: &[f32], x2: &[f32], channels: usize) -> Result<f64> {
    if channels == 0 || x1.len() % channels != 0 || x2.len() % channels != 0 {
        return Err(Error::Dimension(format!(
            "images of {} and {} values do not split into {channels} channels",
            x1.len(),
            x2.len()
        )));
    }
    let (h1, h2) = (histograms(x1, channels), histograms(x2, channels));
    let sq: f64 = h1
        .iter()
        .zip(&h2)
        .flat_map(|(a, b)| a.iter().zip(b.iter()))
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sq / (256 * channels) as f64)
}

/// For each non-overlapping 8×8 patch of `x1`, the smallest mean squared
/// difference to any 8×8 window of `x2` or of its horizontal mirror, averaged
/// over the patches of `x1`. Not symmetric.
pub fn patch_mse(x1: &[f32], dims1: [usize; 3], x2: &[f32], dims2: [usize; 3]) -> Result<f64> {
    let [c, h1, w1] = dims1;
    let [c2, h2, w2] = dims2;
    if c != c2 || h1 < PATCH || w1 < PATCH || h2 < PATCH || w2 < PATCH {
        return Err(Error::Dimension(format!(
            "patch distance needs same-channel images of at least {PATCH}×{PATCH}, got {dims1:?} and {dims2:?}"
        )));
    }
    if x1.len() != c * h1 * w1 || x2.len() != c * h2 * w2 {
        return Err(Error::Dimension("pixel count does not match dims".into()));
    }
    let mut mirror = vec![0.0f32; x2.len()];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                mirror[(ch * h2 + y) * w2 + x] = x2[(ch * h2 + y) * w2 + (w2 - 1 - x)];
            }
        }
    }
    let norm = (c * PATCH * PATCH) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for py in (0..=h1 - PATCH).step_by(PATCH) {
        for px in (0..=w1 - PATCH).step_by(PATCH) {
            let mut best = f64::INFINITY;
            for cand in [x2, mirror.as_slice()] {
                for qy in 0..=h2 - PATCH {
                    for qx in 0..=w2 - PATCH {
                        let mut sq = 0.0f64;
                        'window: for ch in 0..c {
                            for dy in 0..PATCH {
                                let a = &x1[(ch * h1 + py + dy) * w1 + px..][..PATCH];
                                let b = &cand[(ch * h2 + qy + dy) * w2 + qx..][..PATCH];
                                sq += a.iter().zip(b).map(|(&u, &v)| ((u - v) as f64).powi(2)).sum::<f64>();
                                if sq >= best * norm {
                                    break 'window;
                                }
                            }
                        }
                        best = best.min(sq / norm);
                    }
                }
            }
            total += best;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    /// `identical`, `base` or `policy`, each measured against the unaugmented image.
    pub pair: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

fn summarize(pair: &str, metric: &str, v: &[f64]) -> DistanceSummary {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    DistanceSummary {
        pair: pair.into(),
        metric: metric.into(),
        mean,
        std: var.sqrt(),
        samples: v.len(),
    }
}

/// Mean ± sample std of both distances for three pairings of every image:
/// itself, its base view and its policy view (policy, then base pipeline).
pub fn augmentation_distances(batch: &ImageBatch, policy: &AugmentPolicy, pad: usize, seed: u64) -> Result<Vec<DistanceSummary>> {
    if batch.is_empty() {
        return Err(Error::Argument("no images to compare".into()));
    }
    let views = make_views(batch, 1, policy, pad, &mut stream(seed, 0, 0, Purpose::Augment, 0))?;
    let dims = batch.dims();
    let mut out = Vec::with_capacity(6);
    for (pair, other) in [
        ("identical", &batch.images),
        ("base", &views.views[0].images),
        ("policy", &views.views[1].images),
    ] {
        let (mut hist, mut patch) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
        for i in 0..batch.len() {
            let (x, y) = (batch.images.row(i), other.row(i));
            hist.push(histogram_mse(y, x, dims[0])?);
            patch.push(patch_mse(y, dims, x, dims)?);
        }
        out.push(summarize(pair, "histogram_mse", &hist));
        out.push(summarize(pair, "patch_mse", &patch));
    }
    Ok(out)
}
