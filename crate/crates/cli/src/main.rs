use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fdkf_cli::batch::run_batch;
use fdkf_cli::compare::compare_manifests;
use fdkf_cli::run::run_experiment;
use fdkf_cli::{CliError, Result};
use fdkf_core::audio_io::config::RawConfig;
use fdkf_core::audio_io::table::write_json;

const DEFAULT_OUT: &str = "fdkf-output";

/// FDKF acoustic echo cancellation experiments.
///
/// Log verbosity is read from FDKF_LOG (error, warn, info, debug, trace).
#[derive(Debug, Parser)]
#[command(name = "fdkf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured filter on one scenario.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured grid of seeds, SER values and nonlinearities.
    Batch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired comparison of run or batch manifests of identical scenarios.
    Compare {
        #[arg(required = true, num_args = 1..)]
        manifests: Vec<PathBuf>,
        /// Also write compare.csv and compare.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(cli: Option<PathBuf>, raw: &RawConfig) -> PathBuf {
    cli.or_else(|| raw.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Runs the command and returns the report lines for stdout.
fn execute(command: Command) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    match command {
        Command::Run { config, seed, out } => {
            let mut raw = RawConfig::from_path(&config)?;
            if seed.is_some() {
                raw.seed = seed;
            }
            let dir = out_dir(out, &raw);
            let manifest = run_experiment(&raw.resolve()?, &dir)?;
            for f in &manifest.filters {
                for s in &f.sections {
                    lines.push(format!(
                        "{:<14} section {} ({}): ERLE mean {} dB, final {} dB",
                        f.name,
                        s.index,
                        s.kind,
                        fmt(s.erle_mean),
                        fmt(s.erle_final)
                    ));
                }
            }
            lines.push(format!("wrote {}", dir.display()));
        }
        Command::Batch { config, out } => {
            let raw = RawConfig::from_path(&config)?;
            let dir = out_dir(out, &raw);
            let batch = run_batch(&raw, &dir)?;
            let failed = batch.cells.iter().filter(|c| c.error.is_some()).count();
            lines.push(format!(
                "{} cells ({failed} failed), summary in {}",
                batch.cells.len(),
                dir.join(&batch.summary).display()
            ));
        }
        Command::Compare { manifests, out } => {
            let report = compare_manifests(&manifests)?;
            let table = report.to_table()?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| fdkf_core::Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                table.write(dir.join("compare.csv"))?;
                write_json(&report, dir.join("compare.json"))?;
            }
            lines.push(table.header.join(","));
            lines.extend(table.rows.iter().map(|row| row.join(",")));
        }
    }
    Ok(lines)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.2}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FDKF_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(lines) => {
            let mut stdout = std::io::stdout().lock();
            // A closed pipe (`fdkf compare ... | head`) is not an error.
            for line in lines {
                if writeln!(stdout, "{line}").is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
        Err(err) => report(&err),
    }
}

fn report(err: &CliError) -> ExitCode {
    let json = serde_json::to_string(&err.report()).unwrap_or_else(|_| err.to_string());
    eprintln!("{json}");
    ExitCode::FAILURE
}
