//! Separable bilinear (triangle filter) resampling.
//!
//! Pixel centers sit at half-integer coordinates. When shrinking, the
//! triangle is widened by the scale factor so every source pixel
//! contributes (area-aware, no aliasing); when enlarging this reduces to
//! plain bilinear interpolation with edge clamping.

use super::{Image, ImageShape};

struct Taps {
    start: usize,
    weights: Vec<f64>,
}

fn taps(in_size: usize, out_size: usize) -> Vec<Taps> {
    let scale = in_size as f64 / out_size as f64;
    let filter_scale = scale.max(1.0);
    let support = filter_scale;
    (0..out_size)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = (center - support + 0.5).floor().max(0.0) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(in_size);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|i| {
                    let d = (i as f64 + 0.5 - center) / filter_scale;
                    (1.0 - d.abs()).max(0.0)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            Taps { start: lo, weights }
        })
        .collect()
}

/// Resamples to `height × width`, keeping the channel count. Returns the
/// input unchanged when the size already matches.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    let src = image.shape();
    if src.height == height && src.width == width {
        return image.clone();
    }
    let ch = src.channels;
    // horizontal pass: src.height × width
    let h_taps = taps(src.width, width);
    let mut tmp = vec![0.0f64; src.height * width * ch];
    for y in 0..src.height {
        for (x, t) in h_taps.iter().enumerate() {
            for c in 0..ch {
                tmp[(y * width + x) * ch + c] = t
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * image.at(y, t.start + i, c) as f64)
                    .sum();
            }
        }
    }
    let v_taps = taps(src.height, height);
    let shape = ImageShape::new(height, width, ch);
    let mut out = Vec::with_capacity(shape.len());
    for t in &v_taps {
        for x in 0..width {
            for c in 0..ch {
                let v: f64 = t
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * tmp[((t.start + i) * width + x) * ch + c])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Image::new(shape, out).expect("resize output matches its shape")
}
