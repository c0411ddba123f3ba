use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fclbench::config::{load_config, ExperimentConfig};
use fclbench::orchestrator::{compare_schemes, export_dataset_file, run_all, summary_line};
use fclbench::FclError;

/// Federated continual learning experiments on a simulated cluster.
#[derive(Debug, Parser)]
#[command(name = "fclbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment once per configured seed.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set schedule.scheme=column`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the experiment under the column, balanced and shuffled schedules.
    CompareSchemes {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write the first seed's dataset as `features...,label,task_id` lines.
    ExportDataset { config: PathBuf, path: PathBuf },
    /// Parse and validate a config, printing the resolved form.
    Validate { config: PathBuf },
}

const OUT_ENV: &str = "FCLBENCH_OUT";

fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, FclError> {
    let env_out = std::env::var(OUT_ENV).ok();
    load_config(path, overrides, env_out.as_deref())
}

fn execute(cli: Cli) -> Result<(), FclError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            run_all(&cfg, |s, t| println!("{}", summary_line(s, t)))?;
        }
        Command::CompareSchemes { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let rows = compare_schemes(&cfg, |s, t| println!("{}", summary_line(s, t)))?;
            println!("{:<10} {:>10}  per-seed", "scheme", "mean");
            for row in rows {
                let seeds: Vec<String> = row
                    .per_seed
                    .iter()
                    .map(|(s, v)| format!("{s}:{v:.4}"))
                    .collect();
                println!(
                    "{:<10} {:>10.4}  {}",
                    row.scheme.name(),
                    row.mean_final_avg_accuracy,
                    seeds.join(" ")
                );
            }
        }
        Command::ExportDataset { config, path } => {
            let cfg = load(&config, &[])?;
            let n = export_dataset_file(&cfg, &path)?;
            println!("wrote {n} examples to {}", path.display());
        }
        Command::Validate { config } => {
            let cfg = load(&config, &[])?;
            print!("{}", cfg.to_config_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fclbench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
