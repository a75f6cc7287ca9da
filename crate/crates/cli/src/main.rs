//! `dtv`: synthesis, iterative evolution, editing, dataset construction and
//! evaluation from the command line.
//!
//! Exit status: 0 success, 2 configuration or input error, 3 backend
//! error, 4 aborted run, 5 mask guidance (supply `--mask`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtv_core::Error;

use crate::commands::CommandError;
use crate::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "dtv",
    version,
    about = "Progressive PBR-to-photorealistic transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// mock, echo, nan, or an http:// endpoint.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Evolution step cap; trajectory length for `dataset build`.
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    #[arg(long, global = true)]
    tau_stop: Option<f64>,
    /// User mask image; switches to user mask mode.
    #[arg(long, global = true)]
    mask: Option<PathBuf>,
    #[arg(long, global = true)]
    prompt: Option<String>,
    /// Worker threads for `dataset build`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Scene manifest or buffer directory.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the first image from the G-buffers.
    Synth,
    /// Run the iterative transfer until convergence.
    Evolve {
        /// Ask the critique agents for a prompt at every step.
        #[arg(long)]
        agent: bool,
    },
    /// Apply one instruction to an existing image.
    Edit {
        /// Image to edit.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Paired training data.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Score run directories.
    Eval {
        /// Run directories, or directories containing them.
        runs: Vec<PathBuf>,
        /// Directory of real photographs for KID.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Build or resume a dataset.
    Build,
}

fn resolve(cli: Cli) -> Result<(Command, RunConfig), Error> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut o = Overrides {
        out: c.out,
        seed: c.seed,
        backend: c.backend,
        max_steps: c.max_steps,
        tau_stop: c.tau_stop,
        mask: c.mask,
        prompt: c.prompt,
        workers: c.workers,
        scene: c.scene,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Evolve { agent } => o.agent = *agent,
        Command::Edit { input } => o.input = input.clone(),
        Command::Eval { runs, reference } => {
            if !runs.is_empty() {
                cfg.eval.runs = runs.clone();
            }
            if reference.is_some() {
                cfg.eval.reference = reference.clone();
            }
        }
        _ => {}
    }
    cfg.apply(o)?;
    Ok((cli.command, cfg))
}

fn run(command: Command, cfg: &RunConfig) -> Result<(), CommandError> {
    match command {
        Command::Synth => commands::synth(cfg),
        Command::Evolve { .. } => commands::evolve(cfg),
        Command::Edit { .. } => commands::edit(cfg),
        Command::Dataset {
            action: DatasetAction::Build,
        } => commands::dataset_build(cfg),
        Command::Eval { .. } => commands::eval(cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = resolve(cli)
        .map_err(CommandError::Core)
        .and_then(|(command, cfg)| run(command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {}", e.error());
            if code == 5 {
                eprintln!(
                    "hint: supply a region with --mask <image> to edit without entity grounding"
                );
            }
            ExitCode::from(code as u8)
        }
    }
}
