//! The `kfusion` command line.
//!
//! Exit codes: 0 on success, 1 for invalid input (including bad flags and
//! malformed files), 2 when a file cannot be read or written.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use kfusion::audio::{load_wav, mel_stub_features};
use kfusion::landmarks::{denormalize, load_landmarks, save_landmarks, IMAGE_SIZE};
use kfusion::plot::plot_frame;
use kfusion::synth::{generate_corpus, SynthSpec};
use kfusion::training::{eval_checkpoint, load_checkpoint, prepare_inputs, train_to_dir};
use kfusion::{Ablation, Error, Result, TrainConfig};

pub const SEED_ENV: &str = "KFUSION_SEED";

#[derive(Debug, Parser)]
#[command(name = "kfusion", version, about = "Audio-driven facial landmark generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Log-mel content features of a WAV file, written as a KFT1 array.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus and write a checkpoint directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON training config; the 30-epoch desk schedule when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on every clip of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict landmarks for one WAV file.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        identity: PathBuf,
        /// 0 angry, 1 disgusted, 2 contempt, 3 fear, 4 happy, 5 neutral, 6 sad, 7 surprised.
        #[arg(long)]
        emotion: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG overlay of reference (blue) and predicted (red) landmarks.
    Plot {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// The seed from `KFUSION_SEED` if set, otherwise `flag`.
fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Validation(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Features { wav, out } => {
            let clip = load_wav(&wav)?;
            mel_stub_features(&clip)?.save(&out)
        }
        Command::Synth { n, seed, out } => {
            let seed = seed_override(Some(seed))?.unwrap_or(seed);
            let spec = SynthSpec {
                n_clips: n,
                seed,
                ..SynthSpec::default()
            };
            generate_corpus(&spec, &out).map(|_| ())
        }
        Command::Train {
            corpus,
            config,
            out,
            ablation,
            seed,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::desk(),
            };
            if let Some(a) = ablation {
                cfg.ablation = a;
            }
            if let Some(s) = seed_override(seed)? {
                cfg.seed = s;
            }
            let outcome = train_to_dir(&corpus, &cfg, &out)?;
            let last = outcome.history.last().expect("history has the epoch-0 record");
            eprintln!(
                "trained {} epochs ({}): val F-LD {:.3} -> {:.3}, best {:.3} at epoch {}",
                cfg.epochs,
                cfg.ablation,
                outcome.history[0].f_ld,
                last.f_ld,
                outcome.best_record().f_ld,
                outcome.best_epoch
            );
            Ok(())
        }
        Command::Eval { ckpt, corpus, report } => {
            let r = eval_checkpoint(&ckpt, &corpus)?;
            let text = serde_json::to_string_pretty(&r).expect("report serializes");
            write_text(&report, &(text + "\n"))
        }
        Command::Generate {
            ckpt,
            wav,
            identity,
            emotion,
            out,
        } => {
            let (model, params, _) = load_checkpoint(&ckpt)?;
            let inputs = prepare_inputs(&model.config, &wav, &identity, emotion)?;
            let y = model.predict(&params, &inputs)?;
            save_landmarks(&denormalize(&y, 0, IMAGE_SIZE)?, &out)
        }
        Command::Plot {
            pred,
            reference,
            frame,
            out,
        } => {
            let svg = plot_frame(&load_landmarks(&pred)?, &load_landmarks(&reference)?, frame)?;
            write_text(&out, &svg)
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
