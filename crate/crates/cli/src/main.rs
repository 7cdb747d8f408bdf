use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dbsfm::harness::FoldOutcome;
use dbsfm_cli::commands;
use dbsfm_cli::config::RunConfig;
use dbsfm_cli::{exit_code, EXIT_NUMERIC, EXIT_OK, EXIT_PARTIAL, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "dbsfm", version, about = "Spectrogram-token transformer for chronic field-potential recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        days: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masked-autoencoder pre-training; writes a checkpoint and loss report.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Subject to leave out entirely (repeatable).
        #[arg(long = "exclude-subject")]
        exclude_subject: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Leave-one-subject-out cross-validation.
    Cv {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export final-layer token embeddings as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also emit one CLS row per sequence.
        #[arg(long)]
        cls: bool,
    },
}

fn run(cli: Cli) -> dbsfm::Result<i32> {
    match cli.command {
        Command::Synth {
            config,
            out,
            subjects,
            days,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(n) = subjects {
                cfg.synth.n_subjects = n;
            }
            if let Some(d) = days {
                cfg.synth.days = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ids = commands::synth(&cfg, &out)?;
            eprintln!("wrote {} subjects to {}", ids.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Pretrain {
            data,
            config,
            out,
            exclude_subject,
            epochs,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let n = commands::pretrain_cmd(&cfg, data.as_deref(), &exclude_subject, &out)?;
            eprintln!("pre-trained {n} epochs; checkpoint in {}", out.display());
            Ok(EXIT_OK)
        }
        Command::Cv {
            data,
            config,
            out,
            jobs,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let summary = commands::cv_cmd(&cfg, data.as_deref(), &out, jobs)?;
            for f in &summary.folds {
                if let FoldOutcome::Failed { held_out_subject, error } = f {
                    eprintln!("fold {held_out_subject} failed: {error}");
                }
            }
            for s in &summary.stats {
                eprintln!(
                    "{}: mean r {} (sd {}) over {} folds",
                    s.symptom,
                    s.mean_r.map_or("undefined".into(), |v| format!("{v:.3}")),
                    s.std_r.map_or("undefined".into(), |v| format!("{v:.3}")),
                    s.n_defined
                );
            }
            Ok(match summary.n_failed {
                0 => EXIT_OK,
                n if n == summary.folds.len() => EXIT_NUMERIC,
                _ => EXIT_PARTIAL,
            })
        }
        Command::Embed {
            checkpoint,
            data,
            config,
            out,
            cls,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let rows = commands::embed_cmd(&cfg, &checkpoint, data.as_deref(), &out, cls)?;
            eprintln!("wrote {rows} embedding rows to {}", out.display());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
