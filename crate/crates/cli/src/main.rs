use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparce_cli::config::{self, ExperimentConfig};
use sparce_cli::{fetch, runner, CliError};

#[derive(Parser)]
#[command(name = "sparce", version, about = "Echo state networks with learned readout thresholds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Override a config value, e.g. `--set train.minibatch_size=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Validate and print derived dimensions without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write the results directory.
    Run(ConfigArgs),
    /// Train over `sweep.percentiles` and write a merged surface.
    Sweep(ConfigArgs),
    /// Check a config (and, for MNIST tasks, that the data files exist).
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Download MNIST and verify checksums.
    FetchMnist {
        #[arg(long, default_value = "data/mnist")]
        dir: PathBuf,
        /// http(s) URL or local directory with the gzipped IDX files.
        #[arg(long, default_value = fetch::DEFAULT_BASE_URL)]
        base_url: String,
    },
}

fn load(path: &PathBuf, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    config::load(&text, overrides)
}

fn print(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn experiment(a: &ConfigArgs, sweep: bool) -> Result<(), CliError> {
    let cfg = load(&a.config, &a.overrides)?;
    let out = if a.dry_run { runner::describe(&cfg, sweep)? } else { runner::execute(&cfg, sweep)? };
    print(&out);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Run(a) => experiment(&a, false),
        Cmd::Sweep(a) => experiment(&a, true),
        Cmd::Validate { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            runner::check_data(&cfg)?;
            println!("ok {}", cfg.hash());
            Ok(())
        }
        Cmd::FetchMnist { dir, base_url } => fetch::fetch_mnist(&dir, &base_url, &fetch::MNIST_FILES),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
