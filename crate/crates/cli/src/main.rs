use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use skvarwave_core::experiments::config::{scenario_names, ExperimentConfig};
use skvarwave_core::experiments::output::{config_from_manifest, write_outputs, RunInfo};
use skvarwave_core::experiments::scenarios::{lookup, run_scenario, RunOptions};
use skvarwave_core::Error;

#[derive(Parser)]
#[command(name = "skvarwave", version, about = "Small-mass limit experiments for the stochastic variational wave equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its reports and manifest.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Run even if the coefficient assumptions fail.
        #[arg(long)]
        force: bool,
    },
    /// Check a configuration without running it.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Re-run a single path of a recorded run.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        path: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the registered scenarios.
    List,
}

/// Failure classes, mapped to exit codes 1 (run or assertion) and 2
/// (validation).
enum Failure {
    Assertion(String),
    Validation(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Validation(format!("{e:#}")),
            _ => Failure::Other(e),
        }
    }
}

fn load(config: Option<&Path>, scenario: Option<&str>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (config, scenario) {
        (Some(p), s) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let scen = s.map(str::to_string).or_else(|| {
                text.lines()
                    .map(|l| l.split('#').next().unwrap_or("").trim())
                    .find_map(|l| l.strip_prefix("scenario").map(|r| r.trim_start_matches([' ', '=']).trim().to_string()))
            });
            ExperimentConfig::parse_with_scenario(&text, scen.as_deref())?
        }
        (None, Some(s)) => ExperimentConfig::for_scenario(s)?,
        (None, None) => bail!(Error::Config("give --config or --scenario".into())),
    };
    if let Some(s) = scenario {
        lookup(s)?;
        cfg.set("scenario", s)?;
    }
    Ok(cfg)
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn execute(cfg: &ExperimentConfig, opts: RunOptions, force: bool, out: &Path) -> Result<(), Failure> {
    cfg.validate().map_err(invalid)?;
    let start = Instant::now();
    let result = run_scenario(cfg, opts, force).map_err(anyhow::Error::from)?;
    let info = RunInfo {
        workers: opts.workers.unwrap_or(0),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let manifest = write_outputs(out, cfg, &result, &info).map_err(anyhow::Error::from)?;
    println!("{}", result.summary);
    println!("manifest: {}", manifest.display());
    match result.first_failure() {
        Some(a) => Err(Failure::Assertion(format!(
            "criterion {} failed: {}: measured {}, required {}",
            a.criterion, a.name, a.measured, a.required
        ))),
        None => Ok(()),
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            scenario,
            seed,
            paths,
            out,
            workers,
            force,
        } => {
            let mut cfg = load(config.as_deref(), scenario.as_deref()).map_err(invalid)?;
            if let Some(s) = seed {
                cfg.set("ensemble.seed", s.to_string()).map_err(invalid)?;
            }
            if let Some(p) = paths {
                cfg.set("ensemble.paths", p.to_string()).map_err(invalid)?;
            }
            if let Some(w) = workers {
                cfg.set("ensemble.workers", w.to_string()).map_err(invalid)?;
            }
            let out = match out {
                Some(o) => o,
                None => cfg.out_dir().map_err(invalid)?,
            };
            let opts = RunOptions {
                workers: cfg.workers().map_err(invalid)?,
                only_path: None,
            };
            execute(&cfg, opts, force, &out)
        }
        Command::Validate { config, scenario } => {
            let cfg = load(config.as_deref(), scenario.as_deref()).map_err(invalid)?;
            cfg.validate().map_err(invalid)?;
            print!("{}", cfg.effective());
            println!("configuration is valid");
            Ok(())
        }
        Command::Replay { manifest, path, out } => {
            let cfg = config_from_manifest(&manifest).map_err(invalid)?;
            let out = out.unwrap_or_else(|| {
                manifest
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("replay-{path}"))
            });
            let opts = RunOptions {
                workers: Some(1),
                only_path: Some(path),
            };
            execute(&cfg, opts, true, &out)
        }
        Command::List => {
            for n in scenario_names() {
                let s = lookup(n).map_err(anyhow::Error::from)?;
                println!("{:<24} criterion {:<2} {}", s.name, s.criterion, s.description);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Validation(m)) => {
            eprintln!("validation failed: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
