//! `starsim` command-line front-end.
//!
//! Exit codes: 0 success, 1 tolerance failure, 2 configuration or usage error.

mod commands;
mod config;

pub use commands::*;
pub use config::{ExperimentConfig, Mode, OutputPaths, SweepPoint};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Parser)]
#[command(name = "starsim", version, about = "Star attention simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "STARSIM_WORKERS")]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Star vs. global logits on the query; writes compare.json.
    Compare,
    /// Analytic star/ring/global cost sweep; writes bench.csv.
    Bench,
    /// Divergence per anchor strategy; writes ablate.csv.
    Ablate {
        /// Comma-separated `content/position[@len]` list; overrides the config.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
    /// Attention-mass profiles; writes profile.csv.
    Profile,
    /// Greedy generation; writes decode.json and ledger.csv.
    Decode,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_TOLERANCE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let workers = cli.workers;
    match par::with_workers(workers, || execute(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn csv(header: &str, lines: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn execute(cli: Cli) -> Result<i32> {
    let mut cfg = load_config(&cli)?;
    let dir = cfg.output.dir.clone();
    match cli.command {
        Command::Compare => {
            let report = cmd_compare(&cfg)?;
            let path = write(&dir, "compare.json", &json(&report))?;
            println!(
                "compare: n={} max_abs={} within_tolerance={} -> {}",
                report.num_blocks,
                report.divergence.max_abs,
                report.within_tolerance,
                path.display()
            );
            Ok(if report.within_tolerance {
                EXIT_OK
            } else {
                EXIT_TOLERANCE
            })
        }
        Command::Bench => {
            let rows = cmd_bench(&cfg)?;
            let path = write(
                &dir,
                "bench.csv",
                &csv(BENCH_CSV_HEADER, rows.iter().map(BenchRow::csv_line)),
            )?;
            println!("bench: {} rows -> {}", rows.len(), path.display());
            Ok(EXIT_OK)
        }
        Command::Ablate { strategies } => {
            if !strategies.is_empty() {
                cfg.strategies = Some(strategies);
            }
            let rows = cmd_ablate(&cfg, &cfg.strategies()?)?;
            let path = write(
                &dir,
                "ablate.csv",
                &csv(ABLATE_CSV_HEADER, rows.iter().map(AblateRow::csv_line)),
            )?;
            println!("ablate: {} strategies -> {}", rows.len(), path.display());
            Ok(EXIT_OK)
        }
        Command::Profile => {
            let rows = cmd_profile(&cfg)?;
            let path = write(
                &dir,
                "profile.csv",
                &csv(PROFILE_CSV_HEADER, rows.iter().map(ProfileRow::csv_line)),
            )?;
            println!("profile: {} rows -> {}", rows.len(), path.display());
            Ok(EXIT_OK)
        }
        Command::Decode => {
            let outcome = cmd_decode(&cfg)?;
            let path = write(&dir, "decode.json", &json(&outcome.report))?;
            if let Some(ledger) = &outcome.ledger {
                write(&dir, "ledger.csv", &ledger.to_csv())?;
            }
            println!(
                "decode: {} tokens, agrees_with_global={} -> {}",
                outcome.report.tokens.len(),
                outcome.report.agrees_with_global,
                path.display()
            );
            Ok(EXIT_OK)
        }
    }
}
