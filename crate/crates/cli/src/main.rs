//! `gazeguard`: run, compare and sweep interaction-gated decoding on the
//! planted scenario, and verify the mechanism end to end.
//!
//! Exit codes: 0 on success, 1 on a runtime error or failed check, 2 on an
//! invalid configuration.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gazeguard::config::{RunConfig, KEYS, SEED_ENV};
use gazeguard::harness::SweepParam;
use gazeguard::runner::{self, Artifacts};
use gazeguard::verify::{self, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "gazeguard",
    version,
    about = "Interaction-gated attention boost on a planted toy decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one arm and write steps.csv and report.json.
    Run(RunArgs),
    /// Run baseline, guided, static, entropy-gated and margin-gated arms.
    Compare(RunArgs),
    /// Sweep one parameter of the guided arm.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// kappa, alpha, band or statistic.
        #[arg(long)]
        param: String,
        /// Comma-separated grid; defaults to the parameter's standard grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
    },
    /// Run the end-to-end checks and print a table.
    Verify {
        /// Check names or groups to run (comma-separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Weights file to check and use.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Episodes for the planted checks.
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// List configuration keys with defaults.
    Keys,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    episodes: Option<String>,
    /// baseline, guided or static (run only).
    #[arg(long)]
    arm: Option<String>,
    #[arg(long)]
    band: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Load decoder weights from this file.
    #[arg(long)]
    weights: Option<String>,
    /// Write the decoder weights alongside the other outputs.
    #[arg(long)]
    emit_weights: bool,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<String>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let file = self
            .config
            .as_ref()
            .map(|p| fs::read_to_string(p).map_err(|e| Failure::Config(format!("config file {}: {e}", p.display()))))
            .transpose()?;
        let env_seed = std::env::var(SEED_ENV).ok();
        let named = [
            ("kappa", &self.kappa),
            ("alpha", &self.alpha),
            ("seed", &self.seed),
            ("episodes", &self.episodes),
            ("arm", &self.arm),
            ("band", &self.band),
            ("strategy", &self.strategy),
            ("out_dir", &self.out),
            ("weights", &self.weights),
            ("jobs", &self.jobs),
        ];
        let mut overrides: Vec<(String, String)> = named
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        if self.emit_weights {
            overrides.push(("emit_weights".into(), "true".into()));
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Failure::Config(format!("invalid configuration: --set expects KEY=VALUE, got {kv:?}"))
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        RunConfig::resolve(file.as_deref(), env_seed.as_deref(), &overrides).map_err(|e| Failure::Config(e.to_string()))
    }
}

fn emit(cfg: &RunConfig, artifacts: Result<Artifacts, gazeguard::Error>) -> Result<(), Failure> {
    let artifacts = artifacts.map_err(|e| Failure::Runtime(e.to_string()))?;
    artifacts
        .write_to(&cfg.out_dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.out_dir.display())))?;
    print!("{}", artifacts.summary);
    for (name, _) in &artifacts.files {
        println!("wrote {}", cfg.out_dir.join(name).display());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            emit(&cfg, runner::run(&cfg))
        }
        Command::Compare(args) => {
            let cfg = args.resolve()?;
            emit(&cfg, runner::compare(&cfg))
        }
        Command::Sweep { run, param, grid } => {
            let cfg = run.resolve()?;
            let param: SweepParam = param
                .parse()
                .map_err(|e: gazeguard::Error| Failure::Config(e.to_string()))?;
            let grid = if grid.is_empty() { param.default_grid() } else { grid };
            emit(&cfg, runner::sweep(&cfg, param, &grid))
        }
        Command::Verify {
            only,
            weights,
            episodes,
            jobs,
        } => {
            let opts = VerifyOptions {
                only,
                weights,
                episodes,
                jobs,
            };
            let outcomes = verify::run(&opts).map_err(|e| Failure::Config(e.to_string()))?;
            print!("{}", verify::format_table(&outcomes));
            match outcomes
                .iter()
                .filter(|o| !o.passed)
                .map(|o| o.name)
                .collect::<Vec<_>>()
            {
                failed if failed.is_empty() => Ok(()),
                failed => Err(Failure::Runtime(format!("failed checks: {}", failed.join(", ")))),
            }
        }
        Command::Keys => {
            for (key, default, doc) in KEYS {
                println!(
                    "{key:<22} {:<10} {doc}",
                    if default.is_empty() { "\"\"" } else { default }
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
