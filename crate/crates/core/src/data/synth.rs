//! CIFAR-shaped synthetic stand-in: each class is a colored blob at its own
//! position on a ring, plus distractor blobs in other class colors, a random
//! background and noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub classes: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub size: usize,
    pub distractors: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n: 64,
            classes: 10,
            seed: 0,
            noise: 0.12,
            size: 32,
            distractors: 3,
        }
    }
}

fn hue_rgb(h: f64) -> [f64; 3] {
    let (s, v) = (0.85, 0.95);
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn stamp(img: &mut [f64], size: usize, center: (f64, f64), sigma: f64, color: [f64; 3], strength: f64) {
    for (ch, &c) in color.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2);
                let a = strength * (-d2 / (2.0 * sigma * sigma)).exp();
                let p = &mut img[(ch * size + y) * size + x];
                *p += a * (c - *p);
            }
        }
    }
}

/// Deterministic in `seed`; sample `i` depends only on `(seed, i)` and labels are `i mod K`.
pub fn synth_dataset(opts: &SynthOptions) -> Result<ImageBatch> {
    let SynthOptions {
        n,
        classes,
        seed,
        noise,
        size,
        distractors,
    } = *opts;
    if classes < 2 || n < classes || size < 8 {
        return Err(Error::Argument(format!(
            "synthetic data needs n ≥ K ≥ 2 and size ≥ 8 (n={n}, K={classes}, size={size})"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Argument(format!("noise must be ≥ 0, got {noise}")));
    }
    let plane = size * size;
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    let mid = (size as f64 - 1.0) / 2.0;
    let ring = size as f64 * 0.22;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..n {
        let label = i % classes;
        let mut rng = stream(seed, 0, i as u64, Purpose::Data, 0);
        let bg: f64 = rng.random_range(0.15..0.45);
        let mut img: Vec<f64> = (0..3)
            .flat_map(|_| {
                let tint: f64 = rng.random_range(-0.05..0.05);
                std::iter::repeat_n(bg + tint, plane)
            })
            .collect();
        for _ in 0..distractors {
            let c = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
            let hue = rng.random_range(0..classes) as f64 / classes as f64;
            stamp(&mut img, size, c, size as f64 * 0.09, hue_rgb(hue), 0.55);
        }
        let angle = std::f64::consts::TAU * label as f64 / classes as f64;
        let jitter = size as f64 / 10.0;
        let center = (
            mid + ring * angle.cos() + rng.random_range(-jitter..=jitter),
            mid + ring * angle.sin() + rng.random_range(-jitter..=jitter),
        );
        stamp(&mut img, size, center, size as f64 * 0.11, hue_rgb(label as f64 / classes as f64), 0.6);
        for p in img.iter_mut() {
            let v = *p + noise * gauss.sample(&mut rng);
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
        labels.push(label);
    }
    ImageBatch::new(Tensor::from_vec(&[n, 3, size, size], pixels)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let opts = SynthOptions {
            n: 64,
            classes: 2,
            seed: 11,
            ..SynthOptions::default()
        };
        let a = synth_dataset(&opts).unwrap();
        assert_eq!(a, synth_dataset(&opts).unwrap());
        let ones = a.labels.iter().filter(|&&l| l == 1).count();
        assert!(ones.abs_diff(32) <= 1);
        let other = synth_dataset(&SynthOptions { seed: 12, ..opts }).unwrap();
        assert_ne!(a.images, other.images);
    }

    #[test]
    fn samples_are_a_prefix_family() {
        let small = synth_dataset(&SynthOptions { n: 20, ..SynthOptions::default() }).unwrap();
        let big = synth_dataset(&SynthOptions { n: 40, ..SynthOptions::default() }).unwrap();
        assert_eq!(small, big.head(20));
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(synth_dataset(&SynthOptions { n: 3, classes: 10, ..SynthOptions::default() }).is_err());
    }
}
