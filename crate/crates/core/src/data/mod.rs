//! Image datasets: decoding, resizing, normalization, labeling, splitting,
//! augmentation, synthetic generation and batching.

mod augment;
mod batch;
mod io;
mod pnm;
mod resize;
mod split;
mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

pub use augment::{affine, augment, flip_horizontal, rotate, AffineParams, AugmentSpec};
pub use batch::{Batch, BatchIter};
pub use io::{list_dataset, load_dataset, load_image, load_listed, read_class_map, read_image, write_class_map, write_dataset, CLASS_FILE};
pub use pnm::{decode_pnm, encode_pnm};
pub use resize::resize_bilinear;
pub use split::{split, split_indices, SplitIndices, SplitSpec};
pub use synthetic::gen_synthetic;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("unknown class directories: {}", .0.join(", "))]
    UnknownClasses(Vec<String>),
    #[error("class `{0}` has no images")]
    EmptyClass(String),
    #[error("class `{class}` has {count} samples, at least {needed} are needed to stratify")]
    ClassTooSmall {
        class: String,
        count: usize,
        needed: usize,
    },
    #[error("invalid class map: {0}")]
    ClassMap(String),
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Height, width and channel count of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Interleaved `H × W × C` pixel array.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f32>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || data.len() != shape.len() {
            return Err(DataError::Invalid {
                what: "image",
                reason: format!("{}x{}x{} needs {} values, got {}", shape.height, shape.width, shape.channels, shape.len(), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: ImageShape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }

    /// Divides every value by `divisor`.
    pub fn divided(mut self, divisor: f32) -> Self {
        self.data.iter_mut().for_each(|v| *v /= divisor);
        self
    }

    /// Converts between 1 and 3 channels (replication, or ITU-R 601 luma).
    pub fn with_channels(self, channels: usize) -> Result<Self> {
        let from = self.shape.channels;
        if from == channels {
            return Ok(self);
        }
        let shape = ImageShape { channels, ..self.shape };
        let pixels = self.data.chunks(from);
        let data: Vec<f32> = match (from, channels) {
            (1, n) => pixels.flat_map(|p| std::iter::repeat(p[0]).take(n)).collect(),
            (3 | 4, 1) => pixels.map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect(),
            (4, 3) => pixels.flat_map(|p| p[..3].to_vec()).collect(),
            _ => {
                return Err(DataError::Invalid {
                    what: "channel conversion",
                    reason: format!("{from} -> {channels} channels is not supported"),
                })
            }
        };
        Image::new(shape, data)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Decoded, normalized image with its integer class id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Image,
    pub label: usize,
    pub source_path: Option<String>,
}

/// Ordered class names; a class's id is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DataError::ClassMap("no classes".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(['=', '/', '\\']) || n.trim() != n {
                return Err(DataError::ClassMap(format!("invalid class name `{n}`")));
            }
            if names[..i].contains(n) {
                return Err(DataError::ClassMap(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// The four endoscopy classes, labeled 0 to 3.
    pub fn endoscopy() -> Self {
        Self::new(["normal", "ulcerative_colitis", "polyps", "esophagitis"]).expect("static names are valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `name=id` lines, in id order.
    pub fn to_text(&self) -> String {
        self.names.iter().enumerate().map(|(i, n)| format!("{n}={i}\n")).collect()
    }

    /// Parses `name=id` lines; blank lines and `#` comments are ignored.
    /// Ids must cover `0..K` exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, id) = line
                .split_once('=')
                .ok_or_else(|| DataError::ClassMap(format!("line {}: expected `name=id`", lineno + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| DataError::ClassMap(format!("line {}: bad id `{}`", lineno + 1, id.trim())))?;
            entries.push((id, name.trim().to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(DataError::ClassMap("ids must be 0..K-1, each used once".into()));
        }
        Self::new(entries.into_iter().map(|(_, n)| n))
    }
}

/// Labeled images sharing one shape and class map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: ClassMap,
    pub samples: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(classes: ClassMap, samples: Vec<LabeledImage>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.pixels.shape();
            if let Some(bad) = samples.iter().find(|s| s.pixels.shape() != shape) {
                return Err(DataError::Invalid {
                    what: "dataset",
                    reason: format!("mixed image shapes {:?} and {:?}", shape, bad.pixels.shape()),
                });
            }
        }
        if let Some(bad) = samples.iter().find(|s| s.label >= classes.len()) {
            return Err(DataError::Invalid {
                what: "dataset",
                reason: format!("label {} out of range for {} classes", bad.label, classes.len()),
            });
        }
        Ok(Self { classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.samples.first().map(|s| s.pixels.shape())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}
