use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use schedloc::cli::{self, Report, CALIBRATED_CSV, MEASUREMENTS_CSV};
use schedloc::experiment::{ExperimentConfig, Figure, Scenario};
use schedloc::Error;

/// Scheduled passive self-localization: simulate, calibrate, localize, bound.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// JSON experiment config (defaults to the built-in fig6 preset, position 1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `outputs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed (overrides the config's `rng_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and failures.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated measurements to measurements.csv.
    Simulate,
    /// Calibrate a measurement CSV.
    Calibrate {
        /// Measurement CSV (default: <out>/measurements.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Estimate the listener position from a calibrated CSV.
    Localize {
        /// Calibrated CSV (default: <out>/calibrated.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// HCRB ellipse at the configured listener position.
    Bound,
    /// Run a built-in preset and check it against its acceptance thresholds.
    Reproduce {
        #[arg(value_parser = |s: &str| s.parse::<Figure>().map_err(|e| e.to_string()))]
        figure: Figure,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

fn scenario(args: &Args) -> anyhow::Result<Scenario> {
    let mut config = match &args.config {
        Some(p) => cli::load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        config.rng_seed = s;
    }
    Ok(Scenario::new(config)?)
}

fn run(args: &Args) -> anyhow::Result<Report> {
    if let Command::Reproduce { figure } = &args.command {
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        return Ok(cli::cmd_reproduce(*figure, args.seed, &out)?);
    }
    let sc = scenario(args).context("invalid configuration")?;
    let out = args.out.clone().unwrap_or_else(|| sc.config().outputs.clone());
    let input = |given: &Option<PathBuf>, name: &str| given.clone().unwrap_or_else(|| Path::new(&out).join(name));
    let report = match &args.command {
        Command::Simulate => cli::cmd_simulate(&sc, &out)?,
        Command::Calibrate { input: i } => cli::cmd_calibrate(&sc, &input(i, MEASUREMENTS_CSV), &out)?,
        Command::Localize { input: i } => cli::cmd_localize(&sc, &input(i, CALIBRATED_CSV), &out)?,
        Command::Bound => cli::cmd_bound(&sc, &out)?,
        Command::Reproduce { .. } => unreachable!("handled above"),
    };
    Ok(report)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(&args) {
        Ok(report) => {
            if !args.quiet {
                report.lines.iter().for_each(|l| println!("{l}"));
                report.artifacts.iter().for_each(|p| println!("wrote {}", p.display()));
            }
            report.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            for c in &report.checks {
                if !args.quiet || !c.passed {
                    println!("{c}");
                }
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ACCEPTANCE)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<Error>().is_some_and(Error::is_config);
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_DATA })
        }
    }
}
