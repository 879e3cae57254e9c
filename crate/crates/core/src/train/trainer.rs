use super::{cross_entropy, Adam, Classifier, EarlyStopping, EpochRecord, Result, TrainConfig, TrainError, Verdict};
use crate::data::{AugmentSpec, BatchIter, Dataset};
use crate::metrics::{ConfusionMatrix, Report};
use crate::rng::stream;
use crate::tensor::{cst, Graph, ParamStore, Tensor};
use crate::vit::Mode;

const DROPOUT_STREAM: u64 = 0xd0;
/// Forward passes in evaluation never hold more samples than this.
const EVAL_CHUNK: usize = 32;

/// Validation-set numbers the loop monitors and logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
}

/// Source of per-epoch validation metrics.
pub trait Validation {
    fn validate(&mut self, params: &ParamStore<f32>, epoch: usize) -> Result<ValidationMetrics>;
}

/// Validates by evaluating a model on a held-out dataset.
pub struct DatasetValidation<'a, M> {
    pub model: &'a M,
    pub dataset: &'a Dataset,
    pub batch_size: usize,
}

impl<M: Classifier> Validation for DatasetValidation<'_, M> {
    fn validate(&mut self, params: &ParamStore<f32>, _epoch: usize) -> Result<ValidationMetrics> {
        let eval = evaluate(self.model, params, self.dataset, self.batch_size)?;
        let report = Report::new(&eval.confusion, "validation")?;
        Ok(ValidationMetrics {
            loss: eval.loss,
            accuracy: report.accuracy,
            precision_macro: report.macro_precision,
            recall_macro: report.macro_recall,
        })
    }
}

/// Mean loss, confusion matrix and per-sample predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
}

/// Eval-mode pass over `dataset` in order. Each sample's loss and
/// prediction depend only on that sample, so the result does not depend on
/// `batch_size`.
pub fn evaluate<M: Classifier>(model: &M, params: &ParamStore<f32>, dataset: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::new(dataset.classes.names().to_vec());
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut loss_sum = 0.0;
    let mut unused = stream(0, &[]);
    for batch in BatchIter::new(dataset, batch_size.min(EVAL_CHUNK), None, 0, None)? {
        let g = Graph::new();
        let bound = params.bind(&g);
        let logits = g.value(model.logits(&g, &bound, &batch.images, Mode::Eval, &mut unused)?);
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&batch.labels) {
            loss_sum += sample_loss(row, label);
        }
        for (pred, &label) in logits.argmax_rows()?.into_iter().zip(&batch.labels) {
            confusion.record(label, pred)?;
            predictions.push(pred);
        }
    }
    Ok(Evaluation { loss: loss_sum / dataset.len() as f64, confusion, predictions })
}

/// `−log softmax(row)[label]` via log-sum-exp, in double precision.
fn sample_loss(row: &[f32], label: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    lse - row[label] as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    TargetAccuracy,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStopping => "early_stopping",
            StopReason::TargetAccuracy => "target_accuracy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [StopReason::MaxEpochs, StopReason::EarlyStopping, StopReason::TargetAccuracy]
            .into_iter()
            .find(|r| r.as_str() == s)
    }
}

/// Everything needed to continue a run exactly where it left off.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: ParamStore<f32>,
    pub best_params: ParamStore<f32>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    /// `(epoch, validation loss)` of the best epoch.
    pub best: Option<(usize, f64)>,
    pub stale_epochs: usize,
    pub records: Vec<EpochRecord>,
    pub stop: Option<StopReason>,
}

/// Result of a finished run. `params` are the best epoch's weights.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

/// Epoch loop with early stopping and best-weight tracking.
pub struct Trainer<'m, M> {
    model: &'m M,
    config: TrainConfig,
    params: ParamStore<f32>,
    best_params: ParamStore<f32>,
    adam: Adam<f32>,
    stopper: EarlyStopping,
    records: Vec<EpochRecord>,
    epoch: usize,
    stop: Option<StopReason>,
}

impl<'m, M: Classifier> Trainer<'m, M> {
    pub fn new(model: &'m M, params: ParamStore<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam(), &params);
        Ok(Self {
            model,
            best_params: params.clone(),
            params,
            adam,
            stopper: EarlyStopping::new(config.early_stop_patience, config.early_stop_min_delta),
            config,
            records: Vec::new(),
            epoch: 0,
            stop: None,
        })
    }

    pub fn resume(model: &'m M, config: TrainConfig, state: TrainerState) -> Result<Self> {
        config.validate()?;
        state.best_params.check_same_layout(&state.params)?;
        let adam = Adam::from_state(config.adam(), &state.params, state.adam_step, state.adam_m, state.adam_v)?;
        Ok(Self {
            model,
            params: state.params,
            best_params: state.best_params,
            adam,
            stopper: EarlyStopping::with_state(config.early_stop_patience, config.early_stop_min_delta, state.best, state.stale_epochs),
            config,
            records: state.records,
            epoch: state.epoch,
            stop: state.stop,
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            params: self.params.clone(),
            best_params: self.best_params.clone(),
            adam_step: self.adam.step_count(),
            adam_m: self.adam.first_moments().to_vec(),
            adam_v: self.adam.second_moments().to_vec(),
            epoch: self.epoch,
            best: self.stopper.best(),
            stale_epochs: self.stopper.stale_epochs(),
            records: self.records.clone(),
            stop: self.stop,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn best_params(&self) -> &ParamStore<f32> {
        &self.best_params
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.stopper.best().map(|(e, _)| e)
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop
    }

    fn diverged(&self, what: &'static str, epoch: usize) -> TrainError {
        TrainError::Diverged { what, epoch, last_good_epoch: self.best_epoch() }
    }

    /// One pass over `train` followed by validation.
    pub fn train_epoch(&mut self, train: &Dataset, augment: Option<&AugmentSpec>, validation: &mut dyn Validation) -> Result<&EpochRecord> {
        if self.stop.is_some() {
            return Err(TrainError::Finished);
        }
        let epoch = self.epoch + 1;
        let cfg = &self.config;
        let batches = BatchIter::new(train, cfg.batch_size, Some(cfg.seed), epoch as u64, augment.cloned())?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, batch) in batches.enumerate() {
            self.params.zero_grad();
            let b = batch.labels.len();
            let per_sample = batch.images.numel() / b;
            let mut image_shape = batch.images.shape().to_vec();
            for (chunk, start) in (0..b).step_by(cfg.micro_batch).enumerate() {
                let end = (start + cfg.micro_batch).min(b);
                image_shape[0] = end - start;
                let images = Tensor::new(&image_shape, batch.images.data()[start * per_sample..end * per_sample].to_vec())?;
                let labels = &batch.labels[start..end];
                let g = Graph::new();
                let bound = self.params.bind(&g);
                let mut rng = stream(cfg.seed, &[DROPOUT_STREAM, epoch as u64, step as u64, chunk as u64]);
                let logits = self.model.logits(&g, &bound, &images, Mode::Train, &mut rng)?;
                let predicted = g.value(logits).argmax_rows()?;
                correct += predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
                let loss = cross_entropy(&g, logits, labels)?;
                let value = g.scalar(loss)? as f64;
                if !value.is_finite() {
                    return Err(self.diverged("training loss", epoch));
                }
                loss_sum += value * labels.len() as f64;
                let grads = g.backward(loss)?;
                self.params.accumulate(&bound, &grads, cst((end - start) as f64 / b as f64))?;
            }
            seen += b;
            if let Some(max_norm) = cfg.grad_clip_norm {
                let norm = self
                    .params
                    .iter()
                    .filter_map(|(_, t)| t.grad())
                    .flat_map(|g| g.iter().map(|&v| (v as f64) * (v as f64)))
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let factor = (max_norm / norm) as f32;
                    self.params.tensors_mut().for_each(|t| t.scale_grad(factor));
                }
            }
            self.adam.step(&mut self.params)?;
        }
        debug_assert_eq!(seen, train.len());
        self.params.zero_grad();

        let val = validation.validate(&self.params, epoch)?;
        if !val.loss.is_finite() {
            return Err(self.diverged("validation loss", epoch));
        }
        self.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            val_precision_macro: val.precision_macro,
            val_recall_macro: val.recall_macro,
        });
        let verdict = self.stopper.observe(epoch, val.loss);
        if verdict == Verdict::Improved {
            self.best_params.copy_values_from(&self.params)?;
        }
        self.epoch = epoch;
        self.stop = if verdict == Verdict::Stop {
            Some(StopReason::EarlyStopping)
        } else if self.config.target_val_accuracy.is_some_and(|t| val.accuracy >= t) {
            Some(StopReason::TargetAccuracy)
        } else if epoch >= self.config.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        Ok(self.records.last().expect("just pushed"))
    }

    /// Trains until a stop condition, calling `on_epoch` after every epoch.
    pub fn run(
        &mut self,
        train: &Dataset,
        augment: Option<&AugmentSpec>,
        validation: &mut dyn Validation,
        on_epoch: &mut dyn FnMut(&Self) -> Result<()>,
    ) -> Result<StopReason> {
        while self.stop.is_none() {
            self.train_epoch(train, augment, validation)?;
            on_epoch(self)?;
        }
        Ok(self.stop.expect("loop exits on stop"))
    }

    /// Hands back the best epoch's weights and the curve.
    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            params: self.best_params,
            records: self.records,
            best_epoch: self.stopper.best().map(|(e, _)| e),
            stop_reason: self.stop.unwrap_or(StopReason::MaxEpochs),
        }
    }
}

/// Full run validating on `val`; returns the best weights.
pub fn train<M: Classifier>(
    model: &M,
    params: ParamStore<f32>,
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    augment: Option<&AugmentSpec>,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(crate::data::DataError::EmptyDataset.into());
    }
    if train.classes != val.classes {
        return Err(TrainError::Config("training and validation class maps differ".into()));
    }
    let mut trainer = Trainer::new(model, params, config.clone())?;
    let mut validation = DatasetValidation { model, dataset: val, batch_size: config.batch_size };
    trainer.run(train, augment, &mut validation, &mut |_| Ok(()))?;
    Ok(trainer.finish())
}
