//! `app`: config-driven experiments for the matlap library.
//!
//! Exit status 0 when every check passes, 1 on a failed check or a
//! numerical error, 2 on a configuration error.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::Command;
use error::AppError;
use report::{OutDir, Report};

#[derive(Debug, Parser)]
#[command(name = "app", version, about = "Run a matlap experiment from a JSON config")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.json, config.json and tables/.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: &Cli) -> Result<bool, AppError> {
    let cfg = config::load(&cli.config, cli.command, cli.seed)?;
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(AppError::Config { path: "--threads".into(), msg: "must be positive".into() });
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let out = OutDir::create(&cli.out)?;
    out.json("config.json", &cfg.echo())?;
    log::info!("running {} with seed {}", cfg.command.name(), cfg.seed);
    let outcome = match cfg.command {
        Command::LaplaceVerify => commands::laplace_verify(&cfg, &out),
        Command::GibbsSample => commands::gibbs_sample(&cfg, &out),
        Command::SdCheck => commands::sd_check(&cfg, &out),
        Command::SdeRun => commands::sde_run(&cfg, &out),
        Command::EntropyEstimate => commands::entropy_estimate(&cfg, &out),
        Command::YosidaTest => commands::yosida_test(&cfg, &out),
    };
    let report = match outcome {
        Ok(o) => Report {
            command: cfg.command.name(),
            seed: cfg.seed,
            pass: o.checks.iter().all(|c| c.pass),
            checks: o.checks,
            results: serde_json::Value::Object(o.results),
            error: None,
        },
        Err(AppError::Numerical(e)) => Report {
            command: cfg.command.name(),
            seed: cfg.seed,
            pass: false,
            checks: Vec::new(),
            results: serde_json::Value::Null,
            error: Some(e.to_string()),
        },
        Err(e) => return Err(e),
    };
    out.json("report.json", &report)?;
    if let Some(e) = &report.error {
        eprintln!("numerical failure in {}: {e}", report.command);
    }
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!("check failed: {} ({})", c.name, c.detail);
    }
    Ok(report.pass)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("APP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
