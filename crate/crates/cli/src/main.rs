mod commands;
mod failure;
mod layout;
mod svg;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use failure::CliResult;

/// Category-level shape and pose estimation from labeled partial point clouds.
#[derive(Debug, Parser)]
#[command(name = "primpose", version)]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads over independent scenes or instances (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[command(subcommand)]
    command: Command,
}

/// Default sizes for primitive counts, descriptor samples and training sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Desk,
    PaperParity,
}

impl Profile {
    pub fn n_primitives(self) -> usize {
        match self {
            Profile::Desk => 64,
            Profile::PaperParity => 256,
        }
    }

    pub fn quadruples(self) -> usize {
        match self {
            Profile::Desk => 10_000,
            Profile::PaperParity => 1_000_000,
        }
    }

    pub fn instances(self) -> usize {
        40
    }
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub seed: u64,
    pub profile: Profile,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit primitives to procedural instances of a category and build its shape basis.
    Fit(commands::fit::FitArgs),
    /// Generate labeled partial-view scenes from a category model.
    Synth(commands::synth::SynthArgs),
    /// Estimate shape and pose for every scene in a directory.
    Estimate(commands::estimate::EstimateArgs),
    /// Score estimates against ground truth and tabulate average precision.
    Eval(commands::eval::EvalArgs),
    /// Render AP curves and optimization traces as SVG.
    Plot(commands::plot::PlotArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| failure::CliError::config(format!("thread pool: {e}")))?;
    }
    let globals = Globals {
        seed: cli.seed,
        profile: cli.profile,
    };
    match cli.command {
        Command::Fit(args) => commands::fit::run(&args, &globals),
        Command::Synth(args) => commands::synth::run(&args, &globals),
        Command::Estimate(args) => commands::estimate::run(&args, &globals),
        Command::Eval(args) => commands::eval::run(&args, &globals),
        Command::Plot(args) => commands::plot::run(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
