//! `vitalflow` command-line tool: synthetic data, preprocessing, subject
//! splits, training, sampling, evaluation and gradient checking.

mod commands;
mod dataset;
mod failure;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::failure::{CmdResult, WithCode, EXIT_USAGE};

/// Exit codes: 0 ok, 2 arguments, 3 I/O, 4 schema, 5 training,
/// 6 shape, 7 evaluation, 8 gradient check.
#[derive(Debug, Parser)]
#[command(name = "vitalflow", version, about = "PPG-conditioned waveform reconstruction", long_about = None)]
struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Configuration layering shared by the pipeline commands.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic subjects with known vital signs.
    Synth(commands::synth::SynthArgs),
    /// Resample to 128 Hz and apply the per-channel filter chain.
    Preprocess(commands::preprocess::PreprocessArgs),
    /// Write subject-disjoint train/val/test manifests.
    Split(commands::split::SplitArgs),
    /// Train a model and keep the checkpoint with the best validation loss.
    Train(commands::train::TrainArgs),
    /// Reconstruct target waveforms from PPG records.
    Sample(commands::sample::SampleArgs),
    /// Score reconstructions against ground truth.
    Eval(commands::eval::EvalArgs),
    /// Finite-difference check of the analytic gradient.
    Gradcheck(commands::gradcheck::GradcheckArgs),
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return failure::fail(EXIT_USAGE, "--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().code(EXIT_USAGE)?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth::run(a),
        Command::Preprocess(a) => commands::preprocess::run(a),
        Command::Split(a) => commands::split::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Sample(a) => commands::sample::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Gradcheck(a) => commands::gradcheck::run(a),
    }
}

/// Prints a parse error followed by the usage of the subcommand involved,
/// then exits with clap's code (2 for bad arguments, 0 for help).
fn parse_error(e: clap::Error) -> ! {
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion)
        || e.to_string().contains("Usage:")
    {
        e.exit()
    }
    let mut cmd = Cli::command();
    cmd.build();
    let name = std::env::args().skip(1).find(|a| cmd.find_subcommand(a).is_some());
    let usage = match name.and_then(|n| cmd.find_subcommand_mut(&n).map(|c| c.render_usage())) {
        Some(u) => u,
        None => cmd.render_usage(),
    };
    eprintln!("{}\n{usage}", e.to_string().trim_end());
    std::process::exit(e.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| parse_error(e));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
