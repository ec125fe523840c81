//! `dccal`: batch driver for DCC-AL estimation, backtesting, simulation
//! studies and portfolio optimisation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use toml::Value;

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "dccal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the two-stage model to a panel and write parameters and paths.
    Fit(Common),
    /// Rolling one-step forecasts with coverage backtests.
    Backtest(Common),
    /// Simulation study: bias and RMSE of the estimator per cell.
    Study(Common),
    /// Rolling minimum-variance / VaR / ES portfolios with a hedging summary.
    Optimize(Common),
    /// Simulate a return panel from the reference data-generating process.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Input CSV (overrides `data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Override any config key, e.g. `--set n_reps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl Common {
    fn config(&self) -> Result<RunConfig, ConfigError> {
        let mut overrides = Vec::new();
        if let Some(d) = &self.data {
            overrides.push(("data".to_string(), Value::String(d.display().to_string())));
        }
        if let Some(o) = &self.output_dir {
            overrides.push(("output_dir".to_string(), Value::String(o.display().to_string())));
        }
        if let Some(s) = self.seed {
            let s = i64::try_from(s).map_err(|_| ConfigError(format!("seed {s} is too large")))?;
            overrides.push(("seed".to_string(), Value::Integer(s)));
        }
        if let Some(a) = self.alpha {
            overrides.push(("alpha".to_string(), Value::Float(a)));
        }
        for s in &self.overrides {
            overrides.push(RunConfig::parse_override(s)?);
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if let Some(e) = err.downcast_ref::<dccal::Error>() {
        return (if e.is_input_error() { 2 } else { 1 }, e.kind());
    }
    if err.downcast_ref::<ConfigError>().is_some() {
        return (2, "ConfigError");
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return (2, "IoError");
    }
    (1, "Error")
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let (common, cmd): (&Common, fn(&RunConfig) -> anyhow::Result<()>) = match &cli.command {
        Command::Fit(c) => (c, commands::fit),
        Command::Backtest(c) => (c, commands::backtest),
        Command::Study(c) => (c, commands::study),
        Command::Optimize(c) => (c, commands::optimize),
        Command::Simulate(c) => (c, commands::simulate),
    };
    let level = match common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot start thread pool: {e}"))?;
    }
    let cfg = common.config()?;
    cmd(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let detail: Vec<String> = err.chain().map(|e| e.to_string()).collect();
            let doc = json!({
                "error": kind,
                "message": err.to_string(),
                "detail": detail,
                "exit_code": code,
            });
            eprintln!("{doc}");
            ExitCode::from(code)
        }
    }
}
