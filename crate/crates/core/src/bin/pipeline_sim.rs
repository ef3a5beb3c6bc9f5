use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use lpm_core::pipeline::{fixed_stages, metrics, realtime_margin, run_wall, simulate, WallOptions};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClockArg {
    Sim,
    Wall,
}

/// Three-stage generator/refiner/decoder pipeline with fixed stage latencies.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Args {
    #[arg(long, default_value_t = 20)]
    chunks: usize,
    /// Generator, refiner and decoder latencies in ms.
    #[arg(long, default_value = "700,700,180", value_delimiter = ',')]
    lat: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ClockArg::Sim)]
    clock: ClockArg,
    /// Wall clock only: multiplier applied to every latency.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Chunk duration used for the real-time margin.
    #[arg(long, default_value_t = 1000.0)]
    chunk_ms: f64,
    /// NDJSON job trace; stdout gets the metrics summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: Args) -> lpm_core::Result<()> {
    if args.lat.len() != 3 {
        return Err(lpm_core::LpmError::Config(format!("--lat takes 3 values, got {}", args.lat.len())));
    }
    let stages = fixed_stages(args.lat[0], args.lat[1], args.lat[2]);
    let trace = match args.clock {
        ClockArg::Sim => simulate(args.chunks, &stages, None)?,
        ClockArg::Wall => run_wall(
            args.chunks,
            &stages,
            None,
            WallOptions {
                time_scale: args.time_scale,
                ..Default::default()
            },
        )?,
    };
    if let Some(path) = &args.out {
        let mut w = BufWriter::new(File::create(path)?);
        trace.write_ndjson(&mut w)?;
        w.flush()?;
    }
    let m = metrics(&trace)?;
    let margin = realtime_margin(&trace, args.chunk_ms)?;
    let min_margin = margin.iter().copied().fold(f64::INFINITY, f64::min);
    let mut summary = serde_json::to_value(&m)?;
    summary["min_realtime_margin_ms"] = serde_json::json!(min_margin);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pipeline-sim: {e}");
            ExitCode::FAILURE
        }
    }
}
