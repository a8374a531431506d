//! `pstp`: generate synthetic data, train, evaluate, profile, sweep and inspect.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pstp_core::{Ablation, Error};

use commands::{SweepParam, SweepRequest};
use manifest::RunConfig;

#[derive(Parser)]
#[command(name = "pstp", version, about = "Progressive spatio-temporal perception for audio-visual QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file with [synth] and [model] sections.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory; writes checkpoints, a metrics log and a manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Report parameters and forward MACs, optionally with ablations.
    Profile {
        #[arg(long)]
        config: PathBuf,
        /// tssm, srsm, avam or lgpm; repeatable.
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Train and evaluate once per value of one configuration parameter.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// K, topk, topm or layers.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only report costs; skip data generation and training.
        #[arg(long)]
        cost_only: bool,
    },
    /// Dump the selection trace and prediction for one bundle.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Repeat a gen, train or sweep run from its manifest into a new directory.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Shape(_) => 3,
        Error::Tape(_) => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Numerical(_) => "numerical",
        Error::Data(_) => "data",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
        Error::Shape(_) => "shape",
        Error::Tape(_) => "internal",
    }
}

fn run(cli: Cli) -> Result<Vec<String>, Error> {
    match cli.command {
        Command::Gen { spec, out } => commands::gen(&RunConfig::load(&spec)?, &out),
        Command::Train { data, config, out, epochs } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(n) = epochs {
                cfg.train = Some(pstp_core::TrainConfig { epochs: n, ..cfg.train_or_default() });
            }
            commands::train(&cfg, &data, &out)
        }
        Command::Eval { ckpt, data, split } => commands::eval(&ckpt, &data, commands::parse_split(&split)?),
        Command::Profile { config, ablate } => {
            let cfg = RunConfig::load(&config)?;
            let ablations = ablate.iter().map(|a| a.parse::<Ablation>()).collect::<Result<Vec<_>, _>>()?;
            commands::profile(&cfg.model, &ablations)
        }
        Command::Sweep { spec, param, values, out, cost_only } => {
            let cfg = RunConfig::load(&spec)?;
            commands::sweep(&SweepRequest {
                cfg: &cfg,
                param: SweepParam::parse(&param)?,
                values: &values,
                out: out.as_deref(),
                cost_only,
            })
        }
        Command::Inspect { ckpt, bundle } => commands::inspect(&ckpt, &bundle),
        Command::Rerun { manifest, out } => commands::rerun(&manifest, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let reason = serde_json::json!({ "error": kind(&e), "code": exit_code(&e), "message": e.to_string() });
            eprintln!("{reason}");
            eprintln!("pstp: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
