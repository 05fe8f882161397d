use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rfprior_harness::config::{ConfigError, Experiment, RunConfig};
use rfprior_harness::experiments;
use rfprior_harness::output::RunDir;

/// Rectified-flow prior experiments on toy 2-D data.
///
/// Outputs go to `$RFPRIOR_RUNS/<run id>` (default root `runs`).
#[derive(Parser, Debug)]
#[command(name = "rfprior", version)]
struct Cli {
    experiment: Experiment,

    /// TOML configuration file; missing keys take the experiment defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set distill.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Write into this directory instead of the runs root.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?,
        None => String::new(),
    };
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let wanted = cli.experiment.as_str();
    if let Some(found) = table.get("experiment").and_then(|v| v.as_str()) {
        if found != wanted {
            return Err(ConfigError::Invalid(format!("config is for experiment {found:?}, not {wanted:?}")).into());
        }
    }
    let mut overrides = vec![format!("experiment=\"{wanted}\"")];
    overrides.extend(cli.set.iter().cloned());
    Ok(RunConfig::from_toml(&text, &overrides)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    let dir = match &cli.out {
        Some(p) => RunDir::create(p.clone()),
        None => RunDir::create(cfg.run_dir()),
    };
    match dir.and_then(|d| experiments::run_in(&cfg, d)) {
        Ok(out) => {
            println!("{}", out.dir.path().display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
