//! `dbn`: datasets, ensembles, bridges, distillation, inference, evaluation and cost tables.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Usage;

#[derive(Debug, Parser)]
#[command(name = "dbn", version, about = "Diffusion bridge networks for cheap deep-ensemble approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated. Applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic classification dataset as CSV.
    Dataset {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train an ensemble of classifiers and write a bundle directory.
    TrainEnsemble {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a bridge from the bundle's source member to a subset ensemble.
    TrainBridge {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Progressively distill a bridge down to a single step.
    Distill {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train-bridge` or `distill`.
        #[arg(long)]
        bridge: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict class probabilities for a feature CSV.
    Infer {
        #[command(flatten)]
        model: commands::ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also save the assembled predictor to this directory.
        #[arg(long)]
        save_predictor: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute accuracy, NLL, Brier, ECE and DEE on a labelled CSV.
    Eval {
        #[command(flatten)]
        model: commands::ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Append one row to this CSV (header written when the file is new).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Parameter and FLOP table for the source, deep ensembles and a bridge predictor.
    Cost {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, num_args = 1..)]
        bridge: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Dataset { out, common } => commands::dataset(&out, &common),
        Command::TrainEnsemble { data, out, common } => commands::train_ensemble(&data, &out, &common),
        Command::TrainBridge {
            bundle,
            data,
            out,
            common,
        } => commands::train_bridge(&bundle, &data, &out, &common),
        Command::Distill {
            bundle,
            data,
            bridge,
            out,
            common,
        } => commands::distill(&bundle, &data, &bridge, &out, &common),
        Command::Infer {
            model,
            input,
            out,
            save_predictor,
            common,
        } => commands::infer(&model, &input, &out, save_predictor.as_deref(), &common),
        Command::Eval {
            model,
            data,
            out,
            csv,
            name,
            common,
        } => commands::eval(&model, &data, &out, csv.as_deref(), &name, &common),
        Command::Cost {
            bundle,
            bridge,
            out,
            common,
        } => commands::cost(&bundle, &bridge, &out, &common),
    }
}

/// 2 usage, 3 data, 4 numeric, 1 anything unclassified.
fn exit_code(err: &anyhow::Error) -> u8 {
    use dbn_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Contract(_) => 2,
                E::Shape { .. } | E::Data(_) | E::VersionMismatch { .. } | E::Io { .. } | E::Json(_) | E::Csv(_) => 3,
                E::NonFinite(_) | E::NonFiniteGradient { .. } | E::InvalidTape(_) => 4,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
