use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pqc::cli::{compare_cmd, identify_cmd, simulate_cmd, sweep_cmd, CliError};
use pqc::config::ConfigSource;

#[derive(Parser)]
#[command(
    name = "pqc",
    version,
    about = "PID-based video quality control simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv + metrics.json.
    Simulate(Common),
    /// Impulse-response order identification of the configured plant.
    Identify {
        #[command(flatten)]
        common: Common,
        /// Length of the impulse experiment in frames.
        #[arg(long, default_value_t = 64)]
        frames: usize,
    },
    /// Controlled vs fixed-QP comparison table.
    Compare(Common),
    /// Metrics for every point of a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid axis `key=v1,v2,...`; repeat for a cartesian product.
        #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Controlled,
    Fixed,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML with dotted keys). Defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "pqc-out")]
    out: PathBuf,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

impl Common {
    fn source(&self) -> Result<ConfigSource, CliError> {
        let mut source = match &self.config {
            Some(path) => ConfigSource::from_file(path)?,
            None => ConfigSource::default(),
        };
        for o in &self.set {
            source.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            source.apply_override(&format!("seed=\"{seed}\""))?;
        }
        if let Some(mode) = self.mode {
            let word = match mode {
                ModeArg::Controlled => "controlled",
                ModeArg::Fixed => "fixed",
            };
            source.apply_override(&format!("mode={word}"))?;
        }
        Ok(source)
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate(c) => simulate_cmd(&c.source()?, &c.out),
        Command::Identify { common, frames } => {
            identify_cmd(&common.source()?, &common.out, frames)
        }
        Command::Compare(c) => compare_cmd(&c.source()?, &c.out),
        Command::Sweep { common, grid } => sweep_cmd(&common.source()?, &common.out, &grid),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
