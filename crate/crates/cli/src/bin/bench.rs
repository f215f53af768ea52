//! Grid runner and report renderer.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use debias_core::bench::{self, reference, BenchConfig, Report};
use debias_core::crows::AggregationOrder;

#[derive(Parser)]
#[command(about = "Debiasing benchmark grid")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    PerSeedFirst,
    MeanFirst,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every cell of the configured grid and append to the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Also render the report into <output_dir>/report.
        #[arg(long)]
        report: bool,
    },
    /// Render tables from an existing results directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "per-seed-first")]
        aggregation: Order,
    },
    /// Render the bundled published reference tables.
    Reference {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Run { config, report } => {
            let cfg = BenchConfig::load(&config)?;
            let run = bench::run_grid(&cfg)?;
            let out = cfg.output_dir();
            bench::write_run(&out, &run)?;
            let failed: Vec<_> = run.results.iter().filter(|r| !r.is_ok()).collect();
            for r in &failed {
                log::warn!("{} failed: {}", r.cell, r.error.as_deref().unwrap_or("?"));
            }
            log::info!("{} cells, {} failed, written to {}", run.results.len(), failed.len(), out.display());
            if report {
                let results = bench::read_results(&out)?;
                bench::render_report(&results, cfg.aggregation)?.write(out.join("report"))?;
            }
            if !failed.is_empty() {
                std::process::exit(2);
            }
        }
        Cmd::Report { input, out, aggregation } => {
            let order = match aggregation {
                Order::PerSeedFirst => AggregationOrder::PerSeedFirst,
                Order::MeanFirst => AggregationOrder::MeanFirst,
            };
            let results = bench::read_results(&input)?;
            bench::render_report(&results, order)?.write(&out)?;
        }
        Cmd::Reference { out } => {
            Report::from_tables(reference::deviation_tables()?, reference::breakdown_tables()?).write(&out)?;
        }
    }
    Ok(())
}
