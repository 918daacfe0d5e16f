use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowpath_bench::config::ExperimentConfig;
use flowpath_bench::{emit_plots, run_order_study, run_sweep, validate_config, BenchError, RunManifest};
use flowpath_core::FrozenRule;

#[derive(Parser)]
#[command(
    name = "flowpath",
    version,
    about = "Benchmark sweeps for flow-path samplers on analytic targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config file).
    #[arg(long, env = "FLOWPATH_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (overrides the config file).
    #[arg(long, env = "FLOWPATH_WORKERS")]
    workers: Option<usize>,
    /// Freeze the velocity below t_min without the 1/(1 - t_min) factor.
    #[arg(long)]
    alg1_verbatim: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (target, sampler, N, seed) cell and write CSV, manifest and samples.
    Run(RunArgs),
    /// Fit convergence orders against the RK4 reference.
    OrderStudy(RunArgs),
    /// Render SVG charts for a manifest.
    Plot {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Parse and check a config file, printing the fully defaulted result.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, BenchError> {
    let mut config = validate_config(&args.config)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if args.workers.is_some() {
        config.workers = args.workers;
    }
    if args.alg1_verbatim {
        config.transform.frozen_rule = FrozenRule::Verbatim;
    }
    Ok(config)
}

fn summarize(manifest: &RunManifest, what: &str) -> ExitCode {
    let failed = manifest.failed_cells();
    eprintln!(
        "{what}: {} cells, {failed} failed, config {}",
        manifest.cells.len(),
        &manifest.config_hash[..12]
    );
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    if failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode, BenchError> {
    match cli.command {
        Command::Run(args) => {
            let config = load(&args)?;
            let manifest = run_sweep(&config)?;
            eprintln!("wrote {}", config.output_dir.display());
            Ok(summarize(&manifest, "sweep"))
        }
        Command::OrderStudy(args) => {
            let config = load(&args)?;
            let manifest = run_order_study(&config)?;
            for s in &manifest.slopes {
                let slope = s.slope.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                println!("{:<12} {:<10} slope {slope}", s.target, s.sampler);
            }
            Ok(summarize(&manifest, "order study"))
        }
        Command::Plot { manifest } => {
            for path in emit_plots(&manifest)? {
                println!("{}", path.display());
            }
            let reloaded = RunManifest::load(&manifest)?;
            for w in &reloaded.warnings {
                eprintln!("warning: {w}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let config = validate_config(&config)?;
            print!(
                "{}",
                toml::to_string(&config).map_err(|e| BenchError::Config(e.to_string()))?
            );
            eprintln!("config ok, hash {}", config.hash());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
