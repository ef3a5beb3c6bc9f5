use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lpm_core::runtime::{parse_script, run_session, SessionConfig};

/// Runs a scripted session and writes its NDJSON trace.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Args {
    /// NDJSON control events (`{"at_ms": .., "kind": ..}` per line).
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    chunks: usize,
    /// Generator, refiner and decoder latencies in ms.
    #[arg(long, value_delimiter = ',')]
    lat: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON session config; flags override its latencies and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: Args) -> lpm_core::Result<()> {
    let mut cfg: SessionConfig = match &args.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => SessionConfig::default(),
    };
    if let Some(lat) = &args.lat {
        cfg.latencies_ms = lat
            .as_slice()
            .try_into()
            .map_err(|_| lpm_core::LpmError::Config(format!("--lat takes 3 values, got {}", lat.len())))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let events = match &args.script {
        Some(p) => parse_script(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let trace = run_session(&events, args.chunks, &cfg)?;
    match &args.out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            trace.write_ndjson(&mut w)?;
            w.flush()?;
        }
        None => trace.write_ndjson(std::io::stdout().lock())?,
    }
    for e in &trace.errors {
        eprintln!("lpm-run: event rejected: {e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lpm-run: {e}");
            ExitCode::FAILURE
        }
    }
}
