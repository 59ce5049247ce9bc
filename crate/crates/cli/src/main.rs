use std::path::PathBuf;
use std::process::ExitCode;

use brokerage_core::config::{load_config, preset, resolve, ExperimentConfig, ExperimentKind};
use brokerage_core::experiments::run;
use brokerage_core::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Optimal brokerage contracts under price impact: solve portfolios, search
/// for the best client set and run the sweep experiments.
#[derive(Parser)]
#[command(name = "brokerage", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Value one portfolio (all agents as clients unless the config names one).
    Solve(Common),
    /// Exhaustive search over every portfolio.
    Search(Common),
    /// Two-axis sweep, or a one-axis sweep of the broker impact.
    Sweep(Common),
    /// Percentile families sorted by impact coefficient.
    Percentile(Common),
    /// Monte Carlo check of the fees on a grid and one twice as fine.
    Mc(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long, required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Use a shipped preset instead of (or under) a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, env = "BROKERAGE_OUT")]
    out: Option<PathBuf>,
    /// Number of time steps.
    #[arg(long)]
    grid: Option<usize>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, env = "BROKERAGE_THREADS")]
    threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&Common, &'static [ExperimentKind]) {
        use ExperimentKind::*;
        match self {
            Command::Solve(c) => (c, &[Solve]),
            Command::Search(c) => (c, &[Search]),
            Command::Sweep(c) => (c, &[Sweep2d, Kappa0Sweep]),
            Command::Percentile(c) => (c, &[Percentile]),
            Command::Mc(c) => (c, &[Montecarlo]),
        }
    }
}

fn execute(cli: &Cli) -> Result<serde_json::Value, Error> {
    let (args, kinds) = cli.command.parts();
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(name) = &args.preset {
        if cfg.preset.is_some() {
            return Err(Error::Config(
                "preset given both on the command line and in the config".into(),
            ));
        }
        cfg.preset = Some(name.clone());
        preset(name)?;
    }
    if let Some(n) = args.grid {
        cfg.n_steps = Some(n);
    }
    let exp_kind = match &cfg.preset {
        Some(name) => cfg.experiment.or(preset(name)?.experiment),
        None => cfg.experiment,
    };
    match exp_kind {
        Some(k) if !kinds.contains(&k) => {
            return Err(Error::Config(format!(
                "config describes a {} experiment, which this subcommand does not run",
                k.name()
            )));
        }
        Some(_) => {}
        None => {
            cfg.experiment = Some(if kinds.len() > 1 && cfg.sweep_y.is_none() {
                kinds[1]
            } else {
                kinds[0]
            });
        }
    }
    let exp = resolve(&cfg)?;
    let out = args
        .out
        .clone()
        .or_else(|| exp.output.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = args.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    log::info!("running {} into {}", exp.kind.name(), out.display());
    let summary = pool.install(|| run(&exp, &out))?;
    Ok(json!({
        "status": "ok",
        "experiment": exp.kind.name(),
        "rows": summary.outcome.rows(),
        "files": summary.files,
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!(
                "{}",
                json!({ "status": "error", "error": { "kind": e.kind(), "message": e.to_string() } })
            );
            ExitCode::FAILURE
        }
    }
}
