//! On-the-fly geometric augmentation: random rotation, zoom, shift and
//! horizontal flip, resampled bilinearly with edge replication outside
//! the source.

use rand::Rng;

use super::{Image, LabeledImage};

/// Ranges of the random transform. All magnitudes zero and `horizontal_flip`
/// off is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub horizontal_flip: bool,
    /// Rotation drawn uniformly from `±rotation_degrees`.
    pub rotation_degrees: f64,
    /// Per-axis zoom drawn from `1 ± zoom_fraction`.
    pub zoom_fraction: f64,
    /// Horizontal shift drawn from `±width_shift_fraction · width`.
    pub width_shift_fraction: f64,
    /// Vertical shift drawn from `±height_shift_fraction · height`.
    pub height_shift_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            rotation_degrees: 15.0,
            zoom_fraction: 0.1,
            width_shift_fraction: 0.1,
            height_shift_fraction: 0.1,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            rotation_degrees: 0.0,
            zoom_fraction: 0.0,
            width_shift_fraction: 0.0,
            height_shift_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip
            && self.rotation_degrees == 0.0
            && self.zoom_fraction == 0.0
            && self.width_shift_fraction == 0.0
            && self.height_shift_fraction == 0.0
    }

    /// Draws one concrete transform for an image of `height × width`.
    pub fn sample<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> AffineParams {
        let mut sym = |mag: f64| if mag > 0.0 { rng.gen_range(-mag..=mag) } else { 0.0 };
        let rotation_degrees = sym(self.rotation_degrees);
        let shift_y = sym(self.height_shift_fraction) * height as f64;
        let shift_x = sym(self.width_shift_fraction) * width as f64;
        let zoom_y = 1.0 + sym(self.zoom_fraction);
        let zoom_x = 1.0 + sym(self.zoom_fraction);
        let flip = self.horizontal_flip && rng.gen_bool(0.5);
        AffineParams { rotation_degrees, zoom_y, zoom_x, shift_y, shift_x, flip }
    }
}

/// A concrete transform. Output pixel `p` (relative to the image center)
/// samples the source at `R(rotation) · (zoom ⊙ p + shift)`; the flip is
/// applied last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_degrees: f64,
    pub zoom_y: f64,
    pub zoom_x: f64,
    pub shift_y: f64,
    pub shift_x: f64,
    pub flip: bool,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { rotation_degrees: 0.0, zoom_y: 1.0, zoom_x: 1.0, shift_y: 0.0, shift_x: 0.0, flip: false }
    }
}

fn sample_bilinear(image: &Image, y: f64, x: f64, c: usize) -> f32 {
    let s = image.shape();
    let y = y.clamp(0.0, (s.height - 1) as f64);
    let x = x.clamp(0.0, (s.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.height - 1), (x0 + 1).min(s.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy, xx| image.at(yy, xx, c) as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

pub fn affine(image: &Image, params: &AffineParams) -> Image {
    let s = image.shape();
    let (cy, cx) = ((s.height as f64 - 1.0) / 2.0, (s.width as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation_degrees.to_radians().sin_cos();
    let warped = Image::from_fn(s, |r, c, ch| {
        let vy = (r as f64 - cy) * params.zoom_y + params.shift_y;
        let vx = (c as f64 - cx) * params.zoom_x + params.shift_x;
        let sy = cos * vy - sin * vx + cy;
        let sx = sin * vy + cos * vx + cx;
        sample_bilinear(image, sy, sx, ch).clamp(0.0, 1.0)
    });
    if params.flip {
        flip_horizontal(&warped)
    } else {
        warped
    }
}

pub fn rotate(image: &Image, degrees: f64) -> Image {
    affine(image, &AffineParams { rotation_degrees: degrees, ..AffineParams::identity() })
}

/// Mirrors columns.
pub fn flip_horizontal(image: &Image) -> Image {
    let w = image.shape().width;
    Image::from_fn(image.shape(), |y, x, c| image.at(y, w - 1 - x, c))
}

/// Applies one random draw of `spec`; the label is untouched.
pub fn augment<R: Rng + ?Sized>(sample: &LabeledImage, spec: &AugmentSpec, rng: &mut R) -> LabeledImage {
    if spec.is_identity() {
        return sample.clone();
    }
    let s = sample.pixels.shape();
    let params = spec.sample(s.height, s.width, rng);
    LabeledImage {
        pixels: affine(&sample.pixels, &params),
        label: sample.label,
        source_path: sample.source_path.clone(),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::ImageShape;

    fn disk(size: usize) -> Image {
        let c = (size as f32 - 1.0) / 2.0;
        Image::from_fn(ImageShape::new(size, size, 1), |y, x, _| {
            let d = ((y as f32 - c).powi(2) + (x as f32 - c).powi(2)).sqrt();
            (size as f32 / 3.0 - d + 0.5).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn zero_spec_is_bit_identical() {
        let img = Image::from_fn(ImageShape::new(5, 7, 3), |y, x, c| ((y * 31 + x * 7 + c) % 10) as f32 / 9.0);
        let sample = LabeledImage { pixels: img, label: 2, source_path: None };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&sample, &AugmentSpec::none(), &mut rng), sample);
        assert_eq!(affine(&sample.pixels, &AffineParams::identity()), sample.pixels);
    }

    #[test]
    fn flip_exchanges_columns() {
        let img = Image::new(ImageShape::new(2, 2, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(flip_horizontal(&img).data(), &[0.2, 0.1, 0.4, 0.3]);
    }

    #[test]
    fn rotation_round_trip_of_centered_disk() {
        let img = disk(72);
        for deg in [5.0, 15.0, 30.0] {
            let back = rotate(&rotate(&img, deg), -deg);
            let mad: f32 = back.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / img.data().len() as f32;
            assert!(mad < 0.02, "{deg} deg: mean abs diff {mad}");
        }
    }

    #[test]
    fn random_draws_keep_shape_range_and_label() {
        let img = Image::from_fn(ImageShape::new(12, 10, 3), |y, x, c| ((y + 2 * x + c) % 5) as f32 / 4.0);
        let sample = LabeledImage { pixels: img, label: 3, source_path: Some("p".into()) };
        let spec = AugmentSpec { rotation_degrees: 45.0, zoom_fraction: 0.3, ..AugmentSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = augment(&sample, &spec, &mut rng);
            assert_eq!(out.label, 3);
            assert_eq!(out.pixels.shape(), sample.pixels.shape());
            assert!(out.pixels.in_unit_range());
        }
    }
}
