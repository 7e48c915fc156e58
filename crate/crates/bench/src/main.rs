use anyhow::{Context, Result};
use besteffort_bench::config::{base_port_from_env, ConfigLayer, RunConfig};
use besteffort_bench::{emit_results, results, run_benchmark};
use clap::{Parser, Subcommand};

/// Best-effort communication benchmarks
#[derive(Parser, Debug)]
#[command(name = "besteffort-bench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a benchmark; with the process locus, start one invocation per rank
    Run(ConfigLayer),
    /// Print the resolved configuration without running
    Check(ConfigLayer),
}

fn resolve(layer: ConfigLayer) -> Result<RunConfig> {
    let layer = layer.with_file()?;
    Ok(RunConfig::resolve(layer, base_port_from_env()?)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Check(layer) => {
            let config = resolve(layer)?;
            println!("{}", serde_json::to_string_pretty(&config)?);
        }
        Command::Run(layer) => {
            let config = resolve(layer)?;
            let records = run_benchmark(&config).context("benchmark failed")?;
            if records.is_empty() {
                // Non-root rank: the root writes the results.
                return Ok(());
            }
            match &config.out {
                Some(dir) => {
                    for path in emit_results(dir, &config, &records)? {
                        eprintln!("wrote {}", path.display());
                    }
                }
                None => print!("{}", results::summary_csv(&config, &records)?),
            }
        }
    }
    Ok(())
}
