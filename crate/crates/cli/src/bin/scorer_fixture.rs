//! Serves a fixture table over the scorer line protocol.

use std::io::{BufReader, BufWriter};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Result};
use clap::Parser;
use debias_core::scorer::{serve, FixtureScorer, FixtureTable};

#[derive(Parser)]
#[command(about = "Fixture-backed scorer")]
struct Cli {
    #[arg(long)]
    fixture: PathBuf,
    /// `stdio` or `tcp:<port>` (`tcp:0` picks a free port and prints it).
    #[arg(long, default_value = "stdio")]
    transport: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let table = Arc::new(FixtureTable::load(&cli.fixture)?);
    if cli.transport == "stdio" {
        let stdin = std::io::stdin().lock();
        let stdout = std::io::stdout().lock();
        serve(&mut FixtureScorer::new(table), stdin, BufWriter::new(stdout))?;
        return Ok(());
    }
    let Some(port) = cli.transport.strip_prefix("tcp:") else {
        bail!("unknown transport {:?}", cli.transport);
    };
    let listener = TcpListener::bind(("127.0.0.1", port.parse::<u16>()?))?;
    println!("listening {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = stream?;
        let table = table.clone();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => return log::warn!("{e}"),
            };
            if let Err(e) = serve(&mut FixtureScorer::new(table), reader, BufWriter::new(stream)) {
                log::warn!("connection closed: {e}");
            }
        });
    }
    Ok(())
}
