use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::augment::augment;
use super::{AugmentSpec, DataError, Dataset, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x51;
const AUGMENT_STREAM: u64 = 0xa6;

/// One mini-batch: images as `[B, H, W, C]`, their labels, and their
/// positions in the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// One epoch of mini-batches. Every sample is visited exactly once and the
/// last batch may be short.
///
/// The visiting order depends only on `(shuffle_seed, epoch)` and each
/// sample's augmentation only on `(augment seed, epoch, sample index)`, so
/// the stream is reproducible whatever the worker count.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    augment: Option<AugmentSpec>,
    epoch: u64,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        dataset: &'a Dataset,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        epoch: u64,
        augment: Option<AugmentSpec>,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(DataError::Invalid { what: "batch size", reason: "must be at least 1".into() });
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut stream(seed, &[SHUFFLE_STREAM, epoch]));
        }
        Ok(Self { dataset, order, batch_size, cursor: 0, augment: augment.filter(|a| !a.is_identity()), epoch })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let shape = self.dataset.image_shape().expect("non-empty dataset");
        let pixels: Vec<Vec<f32>> = indices
            .par_iter()
            .map(|&i| {
                let sample = &self.dataset.samples[i];
                match &self.augment {
                    Some(spec) => {
                        let mut rng = stream(spec.seed, &[AUGMENT_STREAM, self.epoch, i as u64]);
                        augment(sample, spec, &mut rng).pixels.into_data()
                    }
                    None => sample.pixels.data().to_vec(),
                }
            })
            .collect();
        let images = Tensor::new(&[indices.len(), shape.height, shape.width, shape.channels], pixels.concat())
            .expect("batch data matches its shape");
        let labels = indices.iter().map(|&i| self.dataset.samples[i].label).collect();
        Some(Batch { images, labels, indices })
    }
}
