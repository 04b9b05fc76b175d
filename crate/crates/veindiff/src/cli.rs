//! Command-line surface.
//!
//! Six subcommands cover the whole pipeline: `synth` (generate the
//! synthetic dataset), `masks` (fuse classical voter masks into training
//! masks), `pretrain` (segmentation-branch pretraining), `train` (joint
//! end-to-end phase from a pretrain checkpoint), `eval` (session-2
//! verification/identification/segmentation report) and `det` (re-derive
//! the DET CSV from a report's score file).
//!
//! Configuration resolves in layers: built-in defaults, then an optional
//! `--config FILE` (flat `key = value` text), then repeated
//! `--set key=value` overrides, then the dedicated convenience flags
//! (`--data`, and for `synth` also `--classes`/`--samples`/`--seed`/
//! `--out`). Exit codes: 0 on success, 2 on usage errors (unknown
//! flag/subcommand, missing required flag), 1 on runtime failure with a
//! one-line `error: …` diagnostic on stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::classical::FusionParams;
use crate::config::TrainConfig;
use crate::dataset::write_fused_masks;
use crate::error::Result;
use crate::synth::{generate_dataset, DatasetManifest};
use crate::trainer::{det_from_report, evaluate, joint_train, pretrain_segmentation};

#[derive(Parser)]
#[command(
    name = "veindiff",
    version,
    about = "Dual-branch finger-vein training bench: synthetic data, classical mask fusion, \
             segmentation + label-diffusion training, and biometric evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config layers shared by every pipeline subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-session synthetic dataset and its manifest.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of identity classes (overrides `num_classes`).
        #[arg(long)]
        classes: Option<usize>,
        /// Samples per class per session (overrides `samples_per_session`).
        #[arg(long)]
        samples: Option<usize>,
        /// RNG seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset root to write into (overrides `data_root`).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Fuse the classical voters into a training mask for every entry.
    Masks {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root (overrides `data_root`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Also dump each voter's mask under `<root>/debug_masks/<voter>/`.
        #[arg(long)]
        debug_voters: bool,
    },
    /// Pretrain the segmentation branch and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root (overrides `data_root`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Joint-train both branches from a pretraining checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root (overrides `data_root`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Pretraining (or earlier joint) checkpoint to start from.
        #[arg(long, value_name = "FILE")]
        start: PathBuf,
        /// Checkpoint file to write.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the session-2 split and write the report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root (overrides `data_root`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint file to evaluate.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Report path; `<report>.det.csv` and `<report>.scores` are
        /// written beside it.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
    /// Re-derive the DET CSV from a report's `.scores` file.
    Det {
        /// Report path previously produced by `eval`.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
}

fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Synth { config, classes, samples, seed, out } => {
            let mut cfg = config.resolve()?;
            if let Some(c) = classes {
                cfg.num_classes = c;
            }
            if let Some(s) = samples {
                cfg.samples_per_session = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.data_root = dir;
            }
            cfg.validate()?;
            let manifest = generate_dataset(
                &cfg.data_root,
                cfg.num_classes,
                cfg.samples_per_session,
                cfg.image_h,
                cfg.image_w,
                cfg.seed,
            )?;
            Ok(format!(
                "wrote {} image/mask pairs and manifest.txt under {}",
                manifest.entries.len(),
                cfg.data_root.display()
            ))
        }
        Command::Masks { config, data, debug_voters } => {
            let mut cfg = config.resolve()?;
            if let Some(dir) = data {
                cfg.data_root = dir;
            }
            let manifest = DatasetManifest::load(&cfg.data_root.join("manifest.txt"))?;
            let n = write_fused_masks(&cfg.data_root, &manifest, &FusionParams::default(), debug_voters)?;
            Ok(format!("fused {n} masks under {}", cfg.data_root.display()))
        }
        Command::Pretrain { config, data, checkpoint } => {
            let mut cfg = config.resolve()?;
            if let Some(dir) = data {
                cfg.data_root = dir;
            }
            let state = pretrain_segmentation(&cfg, &checkpoint)?;
            let last = state.history.last().map_or(f64::NAN, |e| e.total);
            Ok(format!(
                "pretrained {} epochs (final loss {last:.6}); checkpoint at {}",
                state.epochs_done,
                checkpoint.display()
            ))
        }
        Command::Train { config, data, start, checkpoint } => {
            let mut cfg = config.resolve()?;
            if let Some(dir) = data {
                cfg.data_root = dir;
            }
            let state = joint_train(&cfg, &start, &checkpoint)?;
            let last = state.history.last().map_or(f64::NAN, |e| e.total);
            Ok(format!(
                "trained through epoch {} (final loss {last:.6}); checkpoint at {}",
                state.epochs_done,
                checkpoint.display()
            ))
        }
        Command::Eval { config, data, checkpoint, report } => {
            let mut cfg = config.resolve()?;
            if let Some(dir) = data {
                cfg.data_root = dir;
            }
            let metrics = evaluate(&cfg, &checkpoint, &report)?;
            Ok(format!(
                "wrote {} (+ .det.csv, .scores)\n{}",
                report.display(),
                metrics.to_text().trim_end()
            ))
        }
        Command::Det { report } => {
            let csv = det_from_report(&report)?;
            Ok(format!("wrote {}", csv.display()))
        }
    }
}

/// Parse `argv` and run the selected subcommand, returning the process
/// exit code (0 success, 1 runtime failure, 2 usage error).
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // clap reports help/version through Err as well; those print to
            // stdout and exit 0, real usage errors go to stderr and exit 2.
            let code = err.exit_code();
            let _ = err.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}
