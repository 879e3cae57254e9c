//! Run configuration: flat `key = value` text with `#` comments and dotted
//! keys (`vit.patch_size = 6`). A `[section]` line prefixes the keys that
//! follow it, so `[vit]` then `patch_size = 6` is the same setting.
//!
//! Every key has a default, so an empty file describes a synthetic run
//! with the reference model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use vitforge_core::data::{AugmentSpec, ImageShape, SplitSpec};
use vitforge_core::train::TrainConfig;
use vitforge_core::vit::{Activation, ViTConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{at}: expected `key = value`, found `{text}`")]
    Syntax { at: String, text: String },
    #[error("{at}: unknown key `{key}`")]
    UnknownKey { at: String, key: String },
    #[error("{at}: invalid value `{value}` for `{key}`: {reason}")]
    Value { at: String, key: String, value: String, reason: String },
    #[error("{at}: `{key}` was already set on {first}")]
    Duplicate { at: String, key: String, first: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Everything a command needs: model, optimizer, split and augmentation
/// settings plus paths. One `seed` drives initialization, splitting,
/// shuffling, dropout and augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Model label used in reports.
    pub name: String,
    pub seed: u64,
    /// Dataset root (`root/<class>/<images>` plus `classes.txt`). When
    /// unset, a synthetic dataset is generated in memory.
    pub data_root: Option<PathBuf>,
    pub synthetic_per_class: usize,
    pub output_dir: PathBuf,
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub eval_batch_size: usize,
    pub split: SplitSpec,
    pub augment: AugmentSpec,
    pub augment_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "ViT".into(),
            seed: 0,
            data_root: None,
            synthetic_per_class: 200,
            output_dir: PathBuf::from("runs/default"),
            vit: ViTConfig::default(),
            train: TrainConfig::default(),
            eval_batch_size: 64,
            split: SplitSpec::default(),
            augment: AugmentSpec::default(),
            augment_enabled: true,
        }
    }
}

const KEYS: &[&str] = &[
    "name",
    "seed",
    "data.root",
    "data.synthetic_per_class",
    "output.dir",
    "vit.image_height",
    "vit.image_width",
    "vit.channels",
    "vit.patch_size",
    "vit.projection_dim",
    "vit.num_layers",
    "vit.num_heads",
    "vit.encoder_mlp_dims",
    "vit.head_dims",
    "vit.num_classes",
    "vit.dropout",
    "vit.head_dropout",
    "vit.activation",
    "vit.layernorm_eps",
    "train.learning_rate",
    "train.weight_decay",
    "train.batch_size",
    "train.micro_batch",
    "train.max_epochs",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.early_stop_patience",
    "train.early_stop_min_delta",
    "train.grad_clip_norm",
    "train.target_val_accuracy",
    "train.eval_batch_size",
    "split.test_fraction",
    "split.validation_fraction",
    "split.stratified",
    "augment.enabled",
    "augment.horizontal_flip",
    "augment.rotation_degrees",
    "augment.zoom_fraction",
    "augment.width_shift_fraction",
    "augment.height_shift_fraction",
];

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_f64(v: &str) -> Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err("must be finite".into())
    }
}

fn parse_opt_f64(v: &str) -> Result<Option<f64>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse_f64(v).map(Some)
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected `true` or `false`".into()),
    }
}

fn parse_dims(v: &str) -> Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|d| parse_num::<usize>(d.trim())).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

fn fmt_dims(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Strips one layer of matching double quotes.
fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    /// Applies the settings in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        let mut seen: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let at = format!("line {}", i + 1);
            let line = match raw.find('#') {
                Some(p) if !raw[..p].contains('"') => &raw[..p],
                _ => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { at, text: raw.trim().to_string() });
            };
            let key = match (section.as_str(), key.trim()) {
                ("", k) => k.to_string(),
                (s, k) => format!("{s}.{k}"),
            };
            if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
                return Err(ConfigError::Duplicate { at, key, first: first.clone() });
            }
            self.set_at(&key, value.trim(), &at)?;
            seen.push((key, at));
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let at = format!("override `{assignment}`");
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(ConfigError::Syntax { at, text: assignment.to_string() });
        };
        self.set_at(key.trim(), value.trim(), &at)
    }

    fn set_at(&mut self, key: &str, value: &str, at: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey { at: at.to_string(), key: key.to_string() });
        }
        self.set(key, unquote(value)).map_err(|reason| ConfigError::Value {
            at: at.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            reason,
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "name" => self.name = v.to_string(),
            "seed" => self.seed = parse_num(v)?,
            "data.root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.synthetic_per_class" => self.synthetic_per_class = parse_num(v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "vit.image_height" => self.vit.image.height = parse_num(v)?,
            "vit.image_width" => self.vit.image.width = parse_num(v)?,
            "vit.channels" => self.vit.image.channels = parse_num(v)?,
            "vit.patch_size" => self.vit.patch_size = parse_num(v)?,
            "vit.projection_dim" => self.vit.projection_dim = parse_num(v)?,
            "vit.num_layers" => self.vit.num_layers = parse_num(v)?,
            "vit.num_heads" => self.vit.num_heads = parse_num(v)?,
            "vit.encoder_mlp_dims" => self.vit.encoder_mlp_dims = parse_dims(v)?,
            "vit.head_dims" => self.vit.head_dims = parse_dims(v)?,
            "vit.num_classes" => self.vit.num_classes = parse_num(v)?,
            "vit.dropout" => self.vit.dropout_rate = parse_f64(v)?,
            "vit.head_dropout" => self.vit.head_dropout_rate = parse_f64(v)?,
            "vit.activation" => self.vit.activation = Activation::parse(v).ok_or("expected `gelu` or `relu`")?,
            "vit.layernorm_eps" => self.vit.layernorm_eps = parse_f64(v)?,
            "train.learning_rate" => self.train.learning_rate = parse_f64(v)?,
            "train.weight_decay" => self.train.weight_decay = parse_f64(v)?,
            "train.batch_size" => self.train.batch_size = parse_num(v)?,
            "train.micro_batch" => self.train.micro_batch = parse_num(v)?,
            "train.max_epochs" => self.train.max_epochs = parse_num(v)?,
            "train.adam_beta1" => self.train.adam_beta1 = parse_f64(v)?,
            "train.adam_beta2" => self.train.adam_beta2 = parse_f64(v)?,
            "train.adam_eps" => self.train.adam_eps = parse_f64(v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse_num(v)?,
            "train.early_stop_min_delta" => self.train.early_stop_min_delta = parse_f64(v)?,
            "train.grad_clip_norm" => self.train.grad_clip_norm = parse_opt_f64(v)?,
            "train.target_val_accuracy" => self.train.target_val_accuracy = parse_opt_f64(v)?,
            "train.eval_batch_size" => self.eval_batch_size = parse_num(v)?,
            "split.test_fraction" => self.split.test_fraction = parse_f64(v)?,
            "split.validation_fraction" => self.split.validation_fraction = parse_f64(v)?,
            "split.stratified" => self.split.stratified = parse_bool(v)?,
            "augment.enabled" => self.augment_enabled = parse_bool(v)?,
            "augment.horizontal_flip" => self.augment.horizontal_flip = parse_bool(v)?,
            "augment.rotation_degrees" => self.augment.rotation_degrees = parse_f64(v)?,
            "augment.zoom_fraction" => self.augment.zoom_fraction = parse_f64(v)?,
            "augment.width_shift_fraction" => self.augment.width_shift_fraction = parse_f64(v)?,
            "augment.height_shift_fraction" => self.augment.height_shift_fraction = parse_f64(v)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let aug = &self.augment;
        let vit = &self.vit;
        let t = &self.train;
        match key {
            "name" => format!("\"{}\"", self.name),
            "seed" => self.seed.to_string(),
            "data.root" => format!("\"{}\"", self.data_root.as_deref().map(|p| p.display().to_string()).unwrap_or_default()),
            "data.synthetic_per_class" => self.synthetic_per_class.to_string(),
            "output.dir" => format!("\"{}\"", self.output_dir.display()),
            "vit.image_height" => vit.image.height.to_string(),
            "vit.image_width" => vit.image.width.to_string(),
            "vit.channels" => vit.image.channels.to_string(),
            "vit.patch_size" => vit.patch_size.to_string(),
            "vit.projection_dim" => vit.projection_dim.to_string(),
            "vit.num_layers" => vit.num_layers.to_string(),
            "vit.num_heads" => vit.num_heads.to_string(),
            "vit.encoder_mlp_dims" => fmt_dims(&vit.encoder_mlp_dims),
            "vit.head_dims" => fmt_dims(&vit.head_dims),
            "vit.num_classes" => vit.num_classes.to_string(),
            "vit.dropout" => vit.dropout_rate.to_string(),
            "vit.head_dropout" => vit.head_dropout_rate.to_string(),
            "vit.activation" => vit.activation.as_str().to_string(),
            "vit.layernorm_eps" => vit.layernorm_eps.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.micro_batch" => t.micro_batch.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.adam_beta1" => t.adam_beta1.to_string(),
            "train.adam_beta2" => t.adam_beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.early_stop_patience" => t.early_stop_patience.to_string(),
            "train.early_stop_min_delta" => t.early_stop_min_delta.to_string(),
            "train.grad_clip_norm" => fmt_opt(t.grad_clip_norm),
            "train.target_val_accuracy" => fmt_opt(t.target_val_accuracy),
            "train.eval_batch_size" => self.eval_batch_size.to_string(),
            "split.test_fraction" => self.split.test_fraction.to_string(),
            "split.validation_fraction" => self.split.validation_fraction.to_string(),
            "split.stratified" => self.split.stratified.to_string(),
            "augment.enabled" => self.augment_enabled.to_string(),
            "augment.horizontal_flip" => aug.horizontal_flip.to_string(),
            "augment.rotation_degrees" => aug.rotation_degrees.to_string(),
            "augment.zoom_fraction" => aug.zoom_fraction.to_string(),
            "augment.width_shift_fraction" => aug.width_shift_fraction.to_string(),
            "augment.height_shift_fraction" => aug.height_shift_fraction.to_string(),
            _ => unreachable!("unknown key `{key}`"),
        }
    }

    /// Canonical text form listing every key; parsing it gives back an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Cross-field checks that single values cannot catch.
    pub fn validate(&self) -> Result<()> {
        self.vit.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, f) in [("split.test_fraction", self.split.test_fraction), ("split.validation_fraction", self.split.validation_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(ConfigError::Invalid(format!("{name} = {f} is outside (0, 1)")));
            }
        }
        if self.eval_batch_size == 0 {
            return Err(ConfigError::Invalid("train.eval_batch_size must be at least 1".into()));
        }
        if self.data_root.is_none() && self.synthetic_per_class == 0 {
            return Err(ConfigError::Invalid("data.synthetic_per_class must be at least 1".into()));
        }
        if let Some(root) = &self.data_root {
            if !root.is_dir() {
                return Err(ConfigError::Invalid(format!("data.root {} is not a directory", root.display())));
            }
        }
        if self.augment_enabled {
            let a = &self.augment;
            for (name, v) in [
                ("rotation_degrees", a.rotation_degrees),
                ("zoom_fraction", a.zoom_fraction),
                ("width_shift_fraction", a.width_shift_fraction),
                ("height_shift_fraction", a.height_shift_fraction),
            ] {
                if v < 0.0 {
                    return Err(ConfigError::Invalid(format!("augment.{name} = {v} must be non-negative")));
                }
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> ImageShape {
        self.vit.image
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { seed: self.seed, ..self.split }
    }

    /// `None` when augmentation is disabled.
    pub fn augment_spec(&self) -> Option<AugmentSpec> {
        self.augment_enabled.then_some(AugmentSpec { seed: self.seed, ..self.augment })
    }
}
