use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradsep_cli::check::run_checks;
use gradsep_cli::config::ExperimentConfig;
use gradsep_cli::run::{cmd_run, read_ledger};
use gradsep_cli::table::{
    average_table, domain_tables, render_average_table, render_domain_tables,
};
use gradsep_cli::{CliError, CliResult};
use gradsep_core::data::{synth_generate, write_embeddings, SynthConfig};

#[derive(Parser)]
#[command(
    name = "gradsep",
    version,
    about = "Gradient-aware open-set separation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and append its result to the ledger.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Tabulate one or more results ledgers.
    Table {
        #[arg(required = true)]
        ledgers: Vec<PathBuf>,
        /// One row per method, averaged over all tasks.
        #[arg(long)]
        average: bool,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic dataset as embedding files plus a manifest.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify gradients, identities and metrics against reference computations.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random cases per check.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable")
}

fn synth(out: &Path, config: Option<&Path>, seed: Option<u64>) -> CliResult<()> {
    let mut cfg: SynthConfig = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = synth_generate(&cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let dim = cfg.feature_dim;
    write_embeddings(out.join("source.osde"), &data.source, dim)?;
    write_embeddings(out.join("target.osde"), &data.target, dim)?;
    write_embeddings(out.join("text.osde"), &data.text, dim)?;
    data.manifest.save(out.join("classes.toml"))?;
    println!(
        "wrote {} source, {} target and {} class records to {}",
        data.source.len(),
        data.target.len(),
        data.text.len(),
        out.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, output_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let result = cmd_run(&cfg)?;
            println!("{}", serde_json::to_string(&result).expect("serialisable"));
        }
        Command::Table {
            ledgers,
            average,
            json,
        } => {
            let mut results = Vec::new();
            for path in &ledgers {
                results.extend(read_ledger(path)?);
            }
            let text = if average {
                let table = average_table(&results)?;
                if json {
                    to_json(&table)
                } else {
                    render_average_table(&table)
                }
            } else {
                let tables = domain_tables(&results)?;
                if json {
                    to_json(&tables)
                } else {
                    render_domain_tables(&tables)
                }
            };
            print!("{text}");
            if json {
                println!();
            }
        }
        Command::Synth { out, config, seed } => synth(&out, config.as_deref(), seed)?,
        Command::Check { seed, cases } => {
            let outcomes = run_checks(seed, cases.max(1));
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            for o in &outcomes {
                println!(
                    "{} {}: {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.detail
                );
            }
            if failed > 0 {
                return Err(CliError::CheckFailed {
                    failed,
                    total: outcomes.len(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gradsep: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
