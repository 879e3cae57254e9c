use rand::seq::SliceRandom;

use super::{DataError, Dataset, Result};
use crate::rng::stream;

const SPLIT_STREAM: u64 = 0x5;

/// Train/validation/test partitioning parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Share of the full set held out for testing.
    pub test_fraction: f64,
    /// Share of the remaining training set held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            validation_fraction: 0.1,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        for (name, f) in [("test_fraction", self.test_fraction), ("validation_fraction", self.validation_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(DataError::Invalid { what: "split spec", reason: format!("{name} = {f} is outside (0, 1)") });
            }
        }
        Ok(())
    }

    /// Smallest class size that yields at least one sample per subset.
    pub fn min_class_size(&self) -> usize {
        (1.0 / self.test_fraction.min(self.validation_fraction)).ceil() as usize
    }
}

/// Sample indices of each subset, in shuffled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn take_fraction(pool: &mut Vec<usize>, fraction: f64) -> Vec<usize> {
    let n = (pool.len() as f64 * fraction).round() as usize;
    pool.drain(..n).collect()
}

/// Splits sample indices by `labels`: `test_fraction` of the set for test,
/// then `validation_fraction` of the rest for validation. When stratified,
/// the fractions are applied to every class separately so each subset
/// keeps the parent's class proportions to within one sample.
pub fn split_indices(labels: &[usize], class_names: &[String], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = stream(spec.seed, &[SPLIT_STREAM]);
    let pools: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let needed = spec.min_class_size();
        for (name, members) in class_names.iter().zip(&by_class) {
            if !members.is_empty() && members.len() < needed {
                return Err(DataError::ClassTooSmall { class: name.clone(), count: members.len(), needed });
            }
        }
        by_class
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut out = SplitIndices { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for mut pool in pools {
        pool.shuffle(&mut rng);
        out.test.extend(take_fraction(&mut pool, spec.test_fraction));
        out.validation.extend(take_fraction(&mut pool, spec.validation_fraction));
        out.train.extend(pool);
    }
    for subset in [&mut out.train, &mut out.validation, &mut out.test] {
        subset.shuffle(&mut rng);
    }
    Ok(out)
}

/// Splits a dataset into (train, validation, test).
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(&dataset.labels(), dataset.classes.names(), spec)?;
    Ok((dataset.subset(&idx.train), dataset.subset(&idx.validation), dataset.subset(&idx.test)))
}
