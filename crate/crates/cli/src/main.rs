use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use surronas::{cmd_gen_data, cmd_report, cmd_run, load_config, CliError, RunConfig};
use surronas_core::smallnet::SyntheticSpec;

#[derive(Parser)]
#[command(name = "surronas", version, about = "Surrogate-assisted neuroevolution of CNN architectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image dataset.
    GenData {
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator spec as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Field overrides, e.g. --samples=600 --noise=0.4
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run an evolution and write its artifacts.
    Run {
        /// Run configuration as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Field overrides, e.g. --mode=full --population_size=12 --train.full_epochs=8
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Summarise one run directory, or a full-mode and surrogate-mode pair.
    Report {
        #[arg(required = true, num_args = 1..=2)]
        runs: Vec<PathBuf>,
        /// Output directory; defaults to <first run>/report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { out, config, overrides } => {
            let spec: SyntheticSpec = load_config(config.as_deref(), &overrides)?;
            cmd_gen_data(&spec, &out)?;
            println!("{}", out.display());
        }
        Command::Run { config, overrides } => {
            let cfg: RunConfig = load_config(config.as_deref(), &overrides)?;
            let result = cmd_run(&cfg)?;
            let c = result.timing.counters;
            println!(
                "{}: {} full trainings, {} partial-only, best validation accuracy {}",
                result.run_dir.display(),
                c.full_trainings,
                c.partial_only,
                result.best.map_or("n/a".into(), |b| b.validation_accuracy.to_string())
            );
        }
        Command::Report { runs, out } => {
            let dir = cmd_report(&runs, out.as_deref())?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
