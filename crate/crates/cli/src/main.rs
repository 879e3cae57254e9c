use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitforge_cli::checkpoint::Checkpoint;
use vitforge_cli::config::RunConfig;
use vitforge_cli::{cmd_eval, cmd_gen_synthetic, cmd_predict, cmd_report, cmd_split, cmd_train, configure_threads, CliError, Result};

#[derive(Parser)]
#[command(name = "vitforge", version, about = "Train and evaluate a Vision Transformer image classifier on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file (`key = value` lines); defaults apply to anything unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization, splitting, shuffling, dropout and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(base)) => base,
            (None, None) => RunConfig::default(),
        };
        for s in &self.sets {
            cfg.apply_override(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write train.idx, val.idx and test.idx for a dataset directory.
    Split {
        #[command(flatten)]
        common: Common,
        /// Dataset root; overrides `data.root`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for the index files (default: `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, writing curves.csv, a checkpoint and a test report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the training state in this checkpoint; its config
        /// is the base that --config, --set and --seed modify.
        #[arg(long = "resume", alias = "checkpoint", value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: confusion.csv, confusion.svg, report.txt, report.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index file listing the samples to evaluate.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the predicted class and class probabilities of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write a synthetic texture dataset in the directory layout `train` reads.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Images per class (default: `data.synthetic_per_class`).
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Compare report.json files side by side.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn with_paths(mut cfg: RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> RunConfig {
    if data.is_some() {
        cfg.data_root = data;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    cfg
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Split { common, data, out } => {
            let cfg = with_paths(common.resolve(None)?, data, out);
            let out = cfg.output_dir.clone();
            let [train, val, test] = cmd_split(&cfg, &out)?;
            let _ = writeln!(stdout, "train {train}  val {val}  test {test}  -> {}", out.display());
        }
        Command::Train { common, data, out, resume } => {
            let checkpoint = resume.as_deref().map(Checkpoint::load).transpose()?;
            let base = checkpoint.as_ref().map(|c| c.config.clone());
            let cfg = with_paths(common.resolve(base)?, data, out);
            let summary = cmd_train(&cfg, checkpoint, &mut std::io::stderr())?;
            let _ = writeln!(
                stdout,
                "stopped after {} epochs ({}), best epoch {}, test accuracy {:.4}\ncheckpoint: {}",
                summary.epochs,
                summary.stop_reason.as_str(),
                summary.best_epoch.map_or("none".into(), |e| e.to_string()),
                summary.test_report.accuracy,
                summary.checkpoint.display()
            );
        }
        Command::Eval { checkpoint, data, index, out } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            let (_, report) = cmd_eval(&checkpoint, data, index.as_deref(), &out)?;
            let _ = write!(stdout, "{}", report.render());
        }
        Command::Predict { checkpoint, images } => {
            for (path, p) in images.iter().zip(cmd_predict(&checkpoint, &images)?) {
                if let Some((h, w)) = p.resized_from {
                    eprintln!("warning: {} is {h}x{w}; resized to the model input size", path.display());
                }
                let _ = writeln!(stdout, "{}: {}", path.display(), p.class);
                for (name, prob) in &p.probabilities {
                    let _ = writeln!(stdout, "  {name} {prob:.6}");
                }
            }
        }
        Command::GenSynthetic { common, out, per_class } => {
            let cfg = common.resolve(None)?;
            let n = cmd_gen_synthetic(&cfg, &out, per_class.unwrap_or(cfg.synthetic_per_class))?;
            let _ = writeln!(stdout, "wrote {n} images to {}", out.display());
        }
        Command::Report { reports, out } => {
            let table = cmd_report(&reports)?;
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|source| CliError::Io { path, source })?;
            }
            let _ = write!(stdout, "{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
