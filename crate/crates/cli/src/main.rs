mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cxrseg::model::Architecture;
use cxrseg::tensor::OpKind;
use cxrseg::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cxrseg", version, about = "Chest radiograph organ segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PGM images and masks).
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network; writes best.fcxs, last.fcxs and history.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score one checkpoint, or the majority vote of several, on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
    },
    /// Parameter count and per-layer table of the configured architecture.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of a reduced network for both losses.
    Gradcheck {
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the backward pass of one op kind (negative control).
        #[arg(long, value_parser = parse_op)]
        corrupt: Option<OpKind>,
        /// Elements checked per parameter tensor.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Pairwise Wilcoxon p-values of per-image Jaccard scores.
    Significance {
        #[arg(long, required = true, num_args = 2..)]
        records: Vec<PathBuf>,
        /// Directory for significance_<class>.csv; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_arch(s: &str) -> std::result::Result<Architecture, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

const CORRUPTIBLE: [OpKind; 11] = [
    OpKind::Conv2d,
    OpKind::ConvTranspose2d,
    OpKind::MaxPool2d,
    OpKind::Elu,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Softmax,
    OpKind::GaussianDropout,
    OpKind::Concat,
    OpKind::CrossEntropyDistance,
    OpKind::DiceDistance,
];

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    CORRUPTIBLE.into_iter().find(|k| k.to_string() == s).ok_or_else(|| {
        let names: Vec<String> = CORRUPTIBLE.iter().map(|k| k.to_string()).collect();
        format!("unknown op kind {s:?}; expected one of {}", names.join(", "))
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::from_file)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Dimension(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Numeric(_) => 4,
        Error::State(_) => 1,
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { n, res, seed, out } => commands::synth(n as usize, res, seed, &out).map(|_| true),
        Command::Train { config } => commands::train_cmd(RunConfig::from_file(&config)?).map(|_| true),
        Command::Eval { config, checkpoint } => commands::eval_cmd(RunConfig::from_file(&config)?, &checkpoint).map(|_| true),
        Command::Params { config } => commands::params_cmd(load_config(config.as_deref())?).map(|_| true),
        Command::Gradcheck {
            arch,
            seed,
            corrupt,
            samples,
        } => commands::gradcheck_cmd(arch, seed, corrupt, samples),
        Command::Significance { records, out } => commands::significance_cmd(&records, out.as_deref()).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradcheck failed");
            ExitCode::from(4)
        }
        Err(e) => {
            match &e {
                Error::Config(list) => {
                    eprintln!("configuration errors:");
                    for msg in list {
                        eprintln!("  - {msg}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
