use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use homoglab_cli::commands::{self, Command, Overrides};

#[derive(Parser)]
#[command(name = "homoglab", version, about = "Numerical experiments on stochastic homogenization correctors")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "homoglab.toml")]
    config: PathBuf,
    /// Output root; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `output.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// First seed; overrides `seeds.base`.
    #[arg(long, global = true)]
    seed_base: Option<u64>,
    /// Replace the outputs of a previous run.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Sample one coefficient field and render a_11.
    Field,
    /// Solve and render the correctors of one field.
    Corrector,
    /// Tabulate J over radii and (p, q) pairs.
    Jscan,
    /// Fluctuation scaling, duality, Gaussianity and oscillation.
    Fluct,
    /// Additivity defect.
    Additivity,
    /// Localization by resampling outside a ball.
    Localize,
    /// Homogenized matrix under grid refinement.
    Homog,
    /// White-noise calibration and corrector covariance.
    Gff,
    /// Exact-algebra and infrastructure checks.
    Check,
    /// Collect every summary under the output root.
    Report,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Field => Command::Field,
            Sub::Corrector => Command::Corrector,
            Sub::Jscan => Command::Jscan,
            Sub::Fluct => Command::Fluct,
            Sub::Additivity => Command::Additivity,
            Sub::Localize => Command::Localize,
            Sub::Homog => Command::Homog,
            Sub::Gff => Command::Gff,
            Sub::Check => Command::Check,
            Sub::Report => Command::Report,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let overrides = Overrides {
        out: cli.out,
        workers: cli.workers,
        seed_base: cli.seed_base,
        overwrite: cli.overwrite,
    };
    match commands::run(cli.command.into(), &cli.config, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
