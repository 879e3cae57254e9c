//! Command implementations behind the `vitforge` binary: dataset splitting,
//! training with per-epoch checkpoints, evaluation, prediction, synthetic
//! data generation and report comparison.

pub mod checkpoint;
pub mod config;
pub mod output;

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use vitforge_core::data::{
    gen_synthetic, list_dataset, load_image, load_listed, read_class_map, read_image, split, split_indices, write_dataset, DataError, Dataset,
    Image,
};
use vitforge_core::metrics::{compare, MetricsError, Report};
use vitforge_core::rng::stream;
use vitforge_core::tensor::{Graph, Tensor};
use vitforge_core::train::{evaluate, Classifier, DatasetValidation, Evaluation, StopReason, TrainError, Trainer};
use vitforge_core::vit::{Mode, ModelError, VisionTransformer};

use checkpoint::{Checkpoint, CheckpointError};
use config::{ConfigError, RunConfig};
use output::OutputLock;

pub const CHECKPOINT_FILE: &str = "checkpoint.vitf";
pub const SPLIT_FILES: [&str; 3] = ["train.idx", "val.idx", "test.idx"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{source}{}", last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Train { source: TrainError, last_checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("output directory {} is in use by another vitforge process (delete {} if that process is gone)", .dir.display(), .dir.join(output::LOCK_FILE).display())]
    Locked { dir: PathBuf },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl From<TrainError> for CliError {
    fn from(source: TrainError) -> Self {
        match source {
            TrainError::Data(e) => CliError::Data(e),
            TrainError::Model(e) => CliError::Model(e),
            source => CliError::Train { source, last_checkpoint: None },
        }
    }
}

impl CliError {
    /// Process exit status: 2 configuration or usage, 3 data, 4 training
    /// divergence, 5 checkpoint, 6 output directory locked, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Model(_) => 2,
            CliError::Train { source: TrainError::Config(_), .. } => 2,
            CliError::Data(_) => 3,
            CliError::Train { source: TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. }, .. } => 4,
            CliError::Checkpoint(_) => 5,
            CliError::Locked { .. } => 6,
            CliError::Train { .. } | CliError::Metrics(_) | CliError::Io { .. } => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    output::write_file(path, contents).map_err(io_at(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

fn lock(dir: &Path) -> Result<OutputLock> {
    create_dir(dir)?;
    OutputLock::acquire(dir).map_err(|e| match e.kind() {
        io::ErrorKind::AlreadyExists => CliError::Locked { dir: dir.to_path_buf() },
        _ => CliError::Io { path: dir.join(output::LOCK_FILE), source: e },
    })
}

/// Caps kernel parallelism from `VITFORGE_THREADS`. Results do not depend
/// on the thread count.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("VITFORGE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("VITFORGE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {threads} threads: {e}")))
}

/// `(relative path, label)` lists for train, validation and test.
type Listing = Vec<(String, usize)>;

/// Split of a dataset directory: the index files in `index_dir` when all
/// three exist there, otherwise a fresh split of the sorted listing.
fn split_listing(cfg: &RunConfig, root: &Path, index_dir: Option<&Path>) -> Result<(vitforge_core::data::ClassMap, [Listing; 3])> {
    let classes = read_class_map(root)?;
    if classes.len() != cfg.vit.num_classes {
        return Err(ConfigError::Invalid(format!(
            "dataset {} has {} classes but vit.num_classes = {}",
            root.display(),
            classes.len(),
            cfg.vit.num_classes
        ))
        .into());
    }
    let listing = list_dataset(root, &classes)?;
    let saved = index_dir.map(|d| SPLIT_FILES.map(|f| d.join(f))).filter(|paths| paths.iter().all(|p| p.is_file()));
    let subsets = match saved {
        Some(paths) => {
            let labels: HashMap<&str, usize> = listing.iter().map(|(p, l)| (p.as_str(), *l)).collect();
            let mut out: [Listing; 3] = Default::default();
            for (subset, path) in out.iter_mut().zip(&paths) {
                *subset = listed_subset(&labels, path)?;
            }
            out
        }
        None => {
            let labels: Vec<usize> = listing.iter().map(|(_, l)| *l).collect();
            let idx = split_indices(&labels, classes.names(), &cfg.split_spec())?;
            [idx.train, idx.validation, idx.test].map(|ids| ids.into_iter().map(|i| listing[i].clone()).collect())
        }
    };
    Ok((classes, subsets))
}

fn listed_subset(labels: &HashMap<&str, usize>, index: &Path) -> Result<Listing> {
    let paths = output::read_index(index).map_err(io_at(index))?;
    paths
        .into_iter()
        .map(|p| match labels.get(p.as_str()) {
            Some(&l) => Ok((p, l)),
            None => Err(DataError::Invalid { what: "index file", reason: format!("{}: `{p}` is not in the dataset", index.display()) }.into()),
        })
        .collect()
}

fn synthetic_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let data = gen_synthetic(cfg.synthetic_per_class, cfg.vit.num_classes, cfg.image_shape(), cfg.seed)?;
    Ok(split(&data, &cfg.split_spec())?)
}

/// Writes `count` images per class under `out` and returns how many were
/// written in total.
pub fn cmd_gen_synthetic(cfg: &RunConfig, out: &Path, per_class: usize) -> Result<usize> {
    let data = gen_synthetic(per_class, cfg.vit.num_classes, cfg.image_shape(), cfg.seed)?;
    Ok(write_dataset(&data, out)?.len())
}

/// Line counts of the written index files.
pub fn cmd_split(cfg: &RunConfig, out: &Path) -> Result<[usize; 3]> {
    let root = cfg.data_root.as_deref().ok_or_else(|| CliError::Usage("split needs a dataset (set data.root or pass --data)".into()))?;
    let _lock = lock(out)?;
    let (_, subsets) = split_listing(cfg, root, None)?;
    write_split_files(out, &subsets)?;
    Ok(subsets.each_ref().map(Vec::len))
}

fn write_split_files(dir: &Path, subsets: &[Listing; 3]) -> Result<()> {
    for (name, subset) in SPLIT_FILES.iter().zip(subsets) {
        let paths: Vec<String> = subset.iter().map(|(p, _)| p.clone()).collect();
        write(&dir.join(name), &output::index_text(&paths))?;
    }
    Ok(())
}

/// Writes `confusion.csv`, `confusion.svg`, `report.txt` and `report.json`.
fn write_eval_artifacts(dir: &Path, eval: &Evaluation, model: &str) -> Result<Report> {
    let report = Report::new(&eval.confusion, model)?;
    write(&dir.join("confusion.csv"), &output::confusion_csv(&eval.confusion))?;
    write(&dir.join("confusion.svg"), &output::confusion_svg(&eval.confusion, &format!("{model}: confusion matrix")))?;
    write(&dir.join("report.txt"), &format!("{}mean loss: {:.6}\n", report.render(), eval.loss))?;
    write(&dir.join("report.json"), &format!("{}\n", report.to_json()))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
    pub test_report: Report,
    pub checkpoint: PathBuf,
}

/// Trains per `cfg` into `cfg.output_dir`, optionally continuing from the
/// training state in `resume`. After every epoch `curves.csv` and the
/// checkpoint are rewritten; at the end the best weights are evaluated on
/// the test split.
pub fn cmd_train(cfg: &RunConfig, resume: Option<Checkpoint>, log: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.as_path();
    let _lock = lock(out)?;
    let (train, val, test) = match &cfg.data_root {
        None => synthetic_splits(cfg)?,
        Some(root) => {
            let (classes, subsets) = split_listing(cfg, root, Some(out))?;
            write_split_files(out, &subsets)?;
            let [a, b, c] = subsets.each_ref().map(|s| load_listed(root, &classes, s, cfg.image_shape()));
            (a?, b?, c?)
        }
    };
    write(&out.join("config.txt"), &cfg.to_text())?;

    let state = match resume {
        Some(ck) => {
            let mut state = ck.trainer_state().ok_or_else(|| CliError::Usage("checkpoint has no training state to resume".into()))?;
            // a run that only ran out of epochs continues when given more
            if state.stop == Some(StopReason::MaxEpochs) && state.epoch < cfg.train.max_epochs {
                state.stop = None;
            }
            Some(state)
        }
        None => None,
    };
    let (model, mut trainer);
    match state {
        Some(state) => {
            model = VisionTransformer::from_store(&cfg.vit, &state.params)?;
            trainer = Trainer::resume(&model, cfg.train_config(), state)?;
        }
        None => {
            let (m, params) = VisionTransformer::init::<f32>(&cfg.vit, cfg.seed)?;
            model = m;
            trainer = Trainer::new(&model, params, cfg.train_config())?;
        }
    }

    let ck_path = out.join(CHECKPOINT_FILE);
    let curves_path = out.join("curves.csv");
    write(&curves_path, &output::curves_csv(trainer.records()))?;
    let augment = cfg.augment_spec();
    let mut validation = DatasetValidation { model: &model, dataset: &val, batch_size: cfg.eval_batch_size };
    let mut saved = ck_path.is_file().then(|| ck_path.clone());
    while trainer.stop_reason().is_none() {
        let record = match trainer.train_epoch(&train, augment.as_ref(), &mut validation) {
            Ok(r) => r.clone(),
            Err(source) => return Err(CliError::Train { source, last_checkpoint: saved }),
        };
        write(&curves_path, &output::curves_csv(trainer.records()))?;
        Checkpoint::from_trainer(cfg.clone(), trainer.state()).save(&ck_path)?;
        saved = Some(ck_path.clone());
        let _ = writeln!(
            log,
            "epoch {:>3}/{}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
            record.epoch, cfg.train.max_epochs, record.train_loss, record.train_accuracy, record.val_loss, record.val_accuracy
        );
    }
    let outcome = trainer.finish();
    let eval = evaluate(&model, &outcome.params, &test, cfg.eval_batch_size)?;
    let test_report = write_eval_artifacts(out, &eval, &cfg.name)?;
    Ok(TrainSummary {
        epochs: outcome.records.len(),
        best_epoch: outcome.best_epoch,
        stop_reason: outcome.stop_reason,
        test_report,
        checkpoint: ck_path,
    })
}

/// Evaluates a checkpoint's weights. The samples are, in order of
/// preference: the paths in `index`, the `test.idx` saved next to the
/// checkpoint, or the test part of a fresh split.
pub fn cmd_eval(ck_path: &Path, data_root: Option<PathBuf>, index: Option<&Path>, out: &Path) -> Result<(Evaluation, Report)> {
    let ck = Checkpoint::load(ck_path)?;
    let mut cfg = ck.config;
    if data_root.is_some() {
        cfg.data_root = data_root;
    }
    let dataset = match (&cfg.data_root, index) {
        (None, Some(_)) => return Err(CliError::Usage("--index needs a dataset (pass --data)".into())),
        (None, None) => synthetic_splits(&cfg)?.2,
        (Some(root), index) => {
            let classes = read_class_map(root)?;
            let listing = match index {
                Some(index) => {
                    let all = list_dataset(root, &classes)?;
                    let labels: HashMap<&str, usize> = all.iter().map(|(p, l)| (p.as_str(), *l)).collect();
                    listed_subset(&labels, index)?
                }
                None => {
                    let [_, _, test] = split_listing(&cfg, root, ck_path.parent())?.1;
                    test
                }
            };
            load_listed(root, &classes, &listing, cfg.image_shape())?
        }
    };
    if dataset.classes.len() != cfg.vit.num_classes {
        return Err(ConfigError::Invalid(format!("dataset has {} classes, the model {}", dataset.classes.len(), cfg.vit.num_classes)).into());
    }
    let model = VisionTransformer::from_store(&cfg.vit, &ck.params)?;
    let _lock = lock(out)?;
    let eval = evaluate(&model, &ck.params, &dataset, cfg.eval_batch_size)?;
    let report = write_eval_artifacts(out, &eval, &cfg.name)?;
    Ok((eval, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: String,
    pub probabilities: Vec<(String, f64)>,
    /// Set when the image had to be resized to the model's input size.
    pub resized_from: Option<(usize, usize)>,
}

/// Classifies each image with the checkpoint's weights.
pub fn cmd_predict(ck_path: &Path, images: &[PathBuf]) -> Result<Vec<Prediction>> {
    let ck = Checkpoint::load(ck_path)?;
    let cfg = &ck.config;
    let model = VisionTransformer::from_store(&cfg.vit, &ck.params)?;
    let target = cfg.image_shape();
    let class_names: Vec<String> = match &cfg.data_root {
        Some(root) if root.join(vitforge_core::data::CLASS_FILE).is_file() => read_class_map(root)?.names().to_vec(),
        _ => (0..cfg.vit.num_classes).map(|k| format!("texture_{k}")).collect(),
    };
    let mut out = Vec::with_capacity(images.len());
    for path in images {
        let raw = read_image(path)?.shape();
        let resized_from = ((raw.height, raw.width) != (target.height, target.width)).then_some((raw.height, raw.width));
        let image: Image = load_image(path, target)?;
        let batch = Tensor::new(&[1, target.height, target.width, target.channels], image.into_data()).map_err(ModelError::from)?;
        let g = Graph::new();
        let bound = ck.params.bind(&g);
        let logits = g.value(model.logits(&g, &bound, &batch, Mode::Eval, &mut stream(0, &[]))?);
        let row: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let probabilities: Vec<(String, f64)> = class_names.iter().cloned().zip(exp.iter().map(|e| e / sum)).collect();
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        out.push(Prediction { class: class_names[best].clone(), probabilities, resized_from });
    }
    Ok(out)
}

/// Side-by-side table of saved `report.json` files.
pub fn cmd_report(reports: &[PathBuf]) -> Result<String> {
    let mut loaded = Vec::with_capacity(reports.len());
    for path in reports {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        loaded.push(Report::from_json(&text)?);
    }
    Ok(compare(&loaded)?.render())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_failure_class() {
        let codes = [
            CliError::Config(ConfigError::Invalid("x".into())).exit_code(),
            CliError::Data(DataError::EmptyDataset).exit_code(),
            CliError::from(TrainError::Diverged { what: "loss", epoch: 2, last_good_epoch: Some(1) }).exit_code(),
            CliError::Checkpoint(CheckpointError::TrailingBytes(1)).exit_code(),
            CliError::Locked { dir: PathBuf::from("x") }.exit_code(),
        ];
        assert_eq!(codes, [2, 3, 4, 5, 6]);
    }

    #[test]
    fn divergence_message_points_at_the_checkpoint() {
        let e = CliError::Train {
            source: TrainError::Diverged { what: "training loss", epoch: 3, last_good_epoch: Some(2) },
            last_checkpoint: Some(PathBuf::from("run/checkpoint.vitf")),
        };
        let msg = e.to_string();
        assert!(msg.contains("epoch 3") && msg.contains("run/checkpoint.vitf"), "{msg}");
    }
}
