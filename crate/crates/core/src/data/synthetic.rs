//! Procedural texture classes for desk-scale experiments.
//!
//! Class `k` of `K` is a sinusoidal grating at orientation `πk/K` with
//! `3 + 2k` cycles across the image, a class-specific color tint, random
//! phase, small orientation/frequency jitter and Gaussian pixel noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassMap, DataError, Dataset, Image, ImageShape, LabeledImage, Result};
use crate::rng::stream;

const AMPLITUDE: f64 = 0.3;
const TINT: f64 = 0.08;
const NOISE: f64 = 0.05;

/// `n_per_class` images for each of `classes` texture classes, ordered by
/// class. Deterministic for a given seed.
pub fn gen_synthetic(n_per_class: usize, classes: usize, shape: ImageShape, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || classes == 0 || shape.is_empty() {
        return Err(DataError::Invalid {
            what: "synthetic dataset",
            reason: format!("need at least one image and one class, got n={n_per_class} K={classes} shape={shape:?}"),
        });
    }
    let class_map = ClassMap::new((0..classes).map(|k| format!("texture_{k}")))?;
    let noise = Normal::new(0.0, NOISE).expect("valid sigma");
    let mut samples = Vec::with_capacity(n_per_class * classes);
    for k in 0..classes {
        let mut rng = stream(seed, &[k as u64]);
        let tint: Vec<f64> = (0..shape.channels)
            .map(|c| TINT * (2.0 * PI * (k as f64 / classes as f64 - c as f64 / shape.channels as f64)).cos())
            .collect();
        for _ in 0..n_per_class {
            let theta = PI * k as f64 / classes as f64 + rng.gen_range(-4f64..4.0).to_radians();
            let cycles = (3.0 + 2.0 * k as f64) * rng.gen_range(0.95..1.05);
            let freq = 2.0 * PI * cycles / shape.width as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (sin, cos) = theta.sin_cos();
            let pixels = Image::from_fn(shape, |y, x, c| {
                let wave = (freq * (x as f64 * cos + y as f64 * sin) + phase).cos();
                let v = 0.5 + tint[c] + AMPLITUDE * wave + noise.sample(&mut rng);
                v.clamp(0.0, 1.0) as f32
            });
            samples.push(LabeledImage { pixels, label: k, source_path: None });
        }
    }
    Dataset::new(class_map, samples)
}
