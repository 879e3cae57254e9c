//! VITF checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VITF"  u32 version  u32 text_len  text (UTF-8)  u32 tensor_count
//! per tensor: u16 name_len  name  u8 rank  u32 dims[rank]  f32 data[numel]
//! ```
//!
//! The text block is the canonical run config followed by `state.*` lines
//! (best epoch, optimizer step, early-stopping counters, the epoch log).
//! The tensor table holds the model weights under their parameter names;
//! a resumable checkpoint adds `current:<name>`, `adam_m:<name>` and
//! `adam_v:<name>` for every parameter. All randomness in training is
//! derived from the seed and the epoch counter, so those two fully describe
//! the random state.
//!
//! Loading parses and checks the whole file before building anything.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use vitforge_core::tensor::{ParamStore, Tensor};
use vitforge_core::train::{EpochRecord, StopReason, TrainerState};
use vitforge_core::vit::param_shapes;

use crate::config::{ConfigError, RunConfig};

pub const MAGIC: &[u8; 4] = b"VITF";
pub const VERSION: u32 = 1;

const CURRENT: &str = "current:";
const ADAM_M: &str = "adam_m:";
const ADAM_V: &str = "adam_v:";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a VITF checkpoint (magic bytes {found:02x?})")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint truncated: needed {needed} bytes for {what} at offset {offset}, file has {len}")]
    Truncated { what: &'static str, offset: usize, needed: usize, len: usize },
    #[error("{0} unexpected bytes after the tensor table")]
    TrailingBytes(usize),
    #[error("tensor `{name}` has shape {actual:?}, the config requires {expected:?}")]
    Shape { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("tensor `{0}` is missing")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Training progress needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    /// Weights after the last completed epoch.
    pub current: ParamStore<f32>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
    pub epoch: usize,
    pub stale_epochs: usize,
    pub records: Vec<EpochRecord>,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Weights used for evaluation and prediction; after training these
    /// are the best epoch's.
    pub params: ParamStore<f32>,
    /// Best `(epoch, validation loss)`, if any epoch completed.
    pub best: Option<(usize, f64)>,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    pub fn weights_only(config: RunConfig, params: ParamStore<f32>) -> Self {
        Self { config, params, best: None, resume: None }
    }

    pub fn from_trainer(config: RunConfig, state: TrainerState) -> Self {
        Self {
            config,
            params: state.best_params,
            best: state.best,
            resume: Some(ResumeState {
                current: state.params,
                adam_step: state.adam_step,
                adam_m: state.adam_m,
                adam_v: state.adam_v,
                epoch: state.epoch,
                stale_epochs: state.stale_epochs,
                records: state.records,
                stop: state.stop,
            }),
        }
    }

    /// The trainer state to resume from, if this checkpoint carries one.
    pub fn trainer_state(&self) -> Option<TrainerState> {
        let r = self.resume.as_ref()?;
        Some(TrainerState {
            params: r.current.clone(),
            best_params: self.params.clone(),
            adam_step: r.adam_step,
            adam_m: r.adam_m.clone(),
            adam_v: r.adam_v.clone(),
            epoch: r.epoch,
            best: self.best,
            stale_epochs: r.stale_epochs,
            records: r.records.clone(),
            stop: r.stop,
        })
    }

    fn text(&self) -> String {
        let mut out = self.config.to_text();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let _ = writeln!(out, "state.best_epoch = {}", opt(self.best.map(|(e, _)| e.to_string())));
        let _ = writeln!(out, "state.best_loss = {}", opt(self.best.map(|(_, l)| l.to_string())));
        let _ = writeln!(out, "state.resumable = {}", self.resume.is_some());
        if let Some(r) = &self.resume {
            let _ = writeln!(out, "state.epoch = {}", r.epoch);
            let _ = writeln!(out, "state.adam_step = {}", r.adam_step);
            let _ = writeln!(out, "state.stale_epochs = {}", r.stale_epochs);
            let _ = writeln!(out, "state.stop = {}", r.stop.map_or("none", |s| s.as_str()));
            for rec in &r.records {
                let _ = writeln!(
                    out,
                    "state.record = {},{},{},{},{},{},{}",
                    rec.epoch, rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy, rec.val_precision_macro, rec.val_recall_macro
                );
            }
        }
        out
    }

    /// Streams the encoded checkpoint into `w`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let text = self.text();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32_len(text.len())?.to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let mut tables: Vec<(&str, &ParamStore<f32>)> = vec![("", &self.params)];
        if let Some(r) = &self.resume {
            tables.push((CURRENT, &r.current));
        }
        let count = self.params.len() * if self.resume.is_some() { 4 } else { 1 };
        w.write_all(&u32_len(count)?.to_le_bytes())?;
        for (prefix, store) in &tables {
            for (name, t) in store.iter() {
                write_tensor(w, &format!("{prefix}{name}"), t.shape(), t.data())?;
            }
        }
        if let Some(r) = &self.resume {
            for (prefix, moments) in [(ADAM_M, &r.adam_m), (ADAM_V, &r.adam_v)] {
                for ((name, t), m) in self.params.iter().zip(moments) {
                    write_tensor(w, &format!("{prefix}{name}"), t.shape(), m)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    /// Writes to a temporary file next to `path` and renames it into place,
    /// so a crash never leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("vitf.tmp");
        let file = fs::File::create(&tmp).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(io_err)?;
        w.into_inner().map_err(|e| io_err(e.into_error()))?.sync_all().map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, supported: VERSION });
        }
        let text_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config text")?)
            .map_err(|e| CheckpointError::Malformed(format!("config text is not UTF-8: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut raw = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            raw.push(r.tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }

        let (config_text, state) = split_state(text);
        let config = RunConfig::parse(&config_text)?;
        config.vit.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let resumable = state.flag("state.resumable")?;
        let best = match (state.opt_usize("state.best_epoch")?, state.opt_f64("state.best_loss")?) {
            (Some(e), Some(l)) => Some((e, l)),
            (None, None) => None,
            _ => return Err(CheckpointError::Malformed("state.best_epoch and state.best_loss must both be set or both be none".into())),
        };

        let shapes = param_shapes(&config.vit).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut expected: Vec<(String, &[usize])> = shapes.iter().map(|(n, s)| (n.clone(), s.as_slice())).collect();
        if resumable {
            for prefix in [CURRENT, ADAM_M, ADAM_V] {
                expected.extend(shapes.iter().map(|(n, s)| (format!("{prefix}{n}"), s.as_slice())));
            }
        }
        check_layout(&raw, &expected)?;

        let mut tensors = raw.into_iter().map(|(_, shape, data)| (shape, data));
        let mut store = || -> Result<ParamStore<f32>> {
            let mut s = ParamStore::new();
            for (name, _) in &shapes {
                let (shape, data) = tensors.next().expect("layout checked");
                s.insert(name.clone(), Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?)
                    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            }
            Ok(s)
        };
        let params = store()?;
        let resume = if resumable {
            let current = store()?;
            let mut moments = || (0..shapes.len()).map(|_| tensors.next().expect("layout checked").1).collect::<Vec<_>>();
            let (adam_m, adam_v) = (moments(), moments());
            let stop = match state.get("state.stop")? {
                "none" => None,
                s => Some(StopReason::parse(s).ok_or_else(|| CheckpointError::Malformed(format!("unknown stop reason `{s}`")))?),
            };
            Some(ResumeState {
                current,
                adam_step: state.num("state.adam_step")?,
                adam_m,
                adam_v,
                epoch: state.num("state.epoch")?,
                stale_epochs: state.num("state.stale_epochs")?,
                records: state.records()?,
                stop,
            })
        } else {
            None
        };
        Ok(Self { config, params, best, resume })
    }
}

fn u32_len(n: usize) -> io::Result<u32> {
    u32::try_from(n).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("length {n} does not fit in u32")))
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> io::Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("tensor name `{name}` is too long")))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    let rank = u8::try_from(shape.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "tensor rank above 255"))?;
    w.write_all(&[rank])?;
    for &d in shape {
        w.write_all(&u32_len(d)?.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn check_layout(raw: &[(String, Vec<usize>, Vec<f32>)], expected: &[(String, &[usize])]) -> Result<()> {
    for (i, (name, shape)) in expected.iter().enumerate() {
        let Some((found, actual, _)) = raw.get(i) else {
            return Err(CheckpointError::MissingTensor(name.clone()));
        };
        if found != name {
            return Err(if raw.iter().any(|(n, _, _)| n == name) {
                CheckpointError::Malformed(format!("tensor `{found}` is out of order (expected `{name}`)"))
            } else if expected.iter().any(|(n, _)| n == found) {
                CheckpointError::MissingTensor(name.clone())
            } else {
                CheckpointError::UnexpectedTensor(found.clone())
            });
        }
        if actual.as_slice() != *shape {
            return Err(CheckpointError::Shape { name: name.clone(), expected: shape.to_vec(), actual: actual.clone() });
        }
    }
    if let Some((extra, _, _)) = raw.get(expected.len()) {
        return Err(CheckpointError::UnexpectedTensor(extra.clone()));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { what, offset: self.pos, needed: n, len: self.bytes.len() });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = u16::from_le_bytes(self.take(2, "tensor name length")?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(self.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = self.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).and_then(|n| n.checked_mul(4));
        let Some(nbytes) = numel else {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` shape {shape:?} overflows")));
        };
        let data = self.take(nbytes, "tensor data")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, shape, data))
    }
}

/// Separates `state.*` lines from the run config text.
fn split_state(text: &str) -> (String, State) {
    let mut config = String::new();
    let mut entries = Vec::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim().starts_with("state.") => entries.push((k.trim().to_string(), v.trim().to_string())),
            _ => {
                config.push_str(line);
                config.push('\n');
            }
        }
    }
    (config, State { entries })
}

struct State {
    entries: Vec<(String, String)>,
}

impl State {
    fn malformed(key: &str, reason: impl std::fmt::Display) -> CheckpointError {
        CheckpointError::Malformed(format!("`{key}`: {reason}"))
    }

    fn get(&self, key: &str) -> Result<&str> {
        let mut found = self.entries.iter().filter(|(k, _)| k == key);
        match (found.next(), found.next()) {
            (Some((_, v)), None) => Ok(v),
            (None, _) => Err(Self::malformed(key, "missing")),
            _ => Err(Self::malformed(key, "set more than once")),
        }
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.parse().map_err(|e| Self::malformed(key, e))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Self::malformed(key, format!("expected true or false, found `{v}`"))),
        }
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key)? {
            "none" => Ok(None),
            _ => self.num(key).map(Some),
        }
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key)? {
            "none" => Ok(None),
            _ => self.num(key).map(Some),
        }
    }

    fn records(&self) -> Result<Vec<EpochRecord>> {
        let key = "state.record";
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| {
                let f: Vec<&str> = v.split(',').collect();
                if f.len() != 7 {
                    return Err(Self::malformed(key, format!("expected 7 fields, found {}", f.len())));
                }
                let x = |i: usize| f[i].parse::<f64>().map_err(|e| Self::malformed(key, e));
                Ok(EpochRecord {
                    epoch: f[0].parse().map_err(|e| Self::malformed(key, e))?,
                    train_loss: x(1)?,
                    train_accuracy: x(2)?,
                    val_loss: x(3)?,
                    val_accuracy: x(4)?,
                    val_precision_macro: x(5)?,
                    val_recall_macro: x(6)?,
                })
            })
            .collect()
    }
}
