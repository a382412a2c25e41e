use std::path::PathBuf;
use std::process::ExitCode;

use bno_cli::{default_configs, evaluate, fit, generate, reproduce_all, CliError, CliResult, ExperimentConfig, RootConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bno", version, about = "Uncertainty-aware operator learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training set.
    Generate(Common),
    /// Fit the model to a generated training set.
    Fit(Common),
    /// Predict on held-out inputs and write metrics.
    Evaluate(Common),
    /// Run every experiment and write a pass/fail report.
    ReproduceAll {
        /// Root file listing experiment configs; the shipped ones when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(c: &Common) -> CliResult<ExperimentConfig> {
    if !c.config.is_file() {
        return Err(CliError::NotFound(c.config.clone()));
    }
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.set_out_dir(o.clone());
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(c) => {
            let dir = generate(&load(&c)?)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Fit(c) => {
            let dir = fit(&load(&c)?)?;
            println!("model written to {}", dir.display());
        }
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            evaluate(&cfg)?;
            println!("metrics written to {}", bno_cli::experiments::eval_dir(&cfg).join("metrics.json").display());
        }
        Command::ReproduceAll { config, seed, out } => {
            let (root_out, mut configs) = match config {
                Some(p) => {
                    if !p.is_file() {
                        return Err(CliError::NotFound(p));
                    }
                    let (root, cfgs) = RootConfig::load(&p)?;
                    (root.out_dir, cfgs)
                }
                None => (PathBuf::from("out"), default_configs()),
            };
            if let Some(s) = seed {
                configs.iter_mut().for_each(|c| c.set_seed(s));
            }
            let out_dir = out.unwrap_or(root_out);
            let report = reproduce_all(&configs, &out_dir)?;
            print!("{}", report.to_markdown());
            if !report.passed {
                let failed: Vec<String> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| format!("{} ({})", c.criterion, c.name))
                    .collect();
                return Err(CliError::Acceptance(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
