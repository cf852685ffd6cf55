//! `layerforge` command-line tool.
//!
//! Logs go to stderr; every machine-readable result is a file. Each run
//! writes a `run.json` recording the resolved configuration, and
//! `layerforge replay run.json` repeats the run from that file alone.

mod author;
mod bench;
mod decompose;
mod eval;
mod fit_prior;
mod runlog;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::runlog::{config_error, Context};

#[derive(Parser, Debug)]
#[command(name = "layerforge", version, about = "Train layer VAEs on authored corpora and decompose images into layers")]
struct Cli {
    /// Run on one thread with every reduction in a fixed order.
    #[arg(long, global = true)]
    deterministic: bool,

    /// More log output on stderr (repeat for trace level).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    #[command(flatten)]
    Run(RunCommand),
    /// Repeat a run from its run.json.
    Replay(ReplayArgs),
}

/// Subcommands that produce outputs and a run record.
#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum RunCommand {
    /// Generate an albedo, shading, detail or composite corpus.
    Author(author::AuthorArgs),
    /// Train a layer model on an authored corpus.
    Train(train::TrainArgs),
    /// Fit the code prior of a trained model and store it in the checkpoint.
    FitPrior(fit_prior::FitPriorArgs),
    /// Decompose an image into layers by optimizing latent codes.
    Decompose(decompose::DecomposeArgs),
    /// Train the four comparison VAEs and report held-out reconstruction error.
    BenchVae(bench::BenchArgs),
    /// Score predicted layers against ground truth.
    Eval(eval::EvalArgs),
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// A run.json written by an earlier run.
    run: PathBuf,

    /// Write outputs here instead of the recorded output location.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunCommand {
    fn execute(self, ctx: &Context) -> anyhow::Result<()> {
        match self {
            RunCommand::Author(a) => author::run(a, ctx),
            RunCommand::Train(a) => train::run(a, ctx),
            RunCommand::FitPrior(a) => fit_prior::run(a, ctx),
            RunCommand::Decompose(a) => decompose::run(a, ctx),
            RunCommand::BenchVae(a) => bench::run(a, ctx),
            RunCommand::Eval(a) => eval::run(a, ctx),
        }
    }

    fn redirect(&mut self, out: PathBuf) {
        match self {
            RunCommand::Author(a) => a.out = out,
            RunCommand::Train(a) => a.out = out,
            RunCommand::FitPrior(a) => a.out = out,
            RunCommand::Decompose(a) => a.out = out,
            RunCommand::BenchVae(a) => a.out = out,
            RunCommand::Eval(a) => {
                let name = a.report.file_name().map(PathBuf::from).unwrap_or_else(|| "report.json".into());
                a.report = out.join(name);
            }
        }
    }
}

fn init_threads(deterministic: bool) -> anyhow::Result<usize> {
    let threads = if deterministic {
        1
    } else {
        match std::env::var("LAYERFORGE_THREADS") {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map_err(|_| config_error(format!("LAYERFORGE_THREADS must be a non-negative integer, got {v:?}")))?,
            Err(_) => 0,
        }
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(rayon::current_num_threads())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let outcome = (|| {
        let (command, deterministic) = match cli.command {
            Command::Run(c) => (c, cli.deterministic),
            Command::Replay(r) => {
                let record = runlog::read(&r.run)?;
                let mut command = record.command;
                if let Some(out) = r.out {
                    command.redirect(out);
                }
                (command, record.deterministic || cli.deterministic)
            }
        };
        let threads = init_threads(deterministic)?;
        log::debug!("using {threads} worker thread(s)");
        let ctx = Context { deterministic, command: command.clone() };
        command.execute(&ctx)
    })();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(runlog::exit_code(&e))
        }
    }
}
