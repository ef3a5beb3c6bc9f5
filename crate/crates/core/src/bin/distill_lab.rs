use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lpm_core::distill::train::curriculum_report;
use lpm_core::distill::{Lab, LabConfig};

/// Runs the four-stage distillation curriculum on the analytic teacher.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Args {
    /// Run one stage (1-4), resuming from the checkpoints in --out.
    #[arg(long, conflicts_with = "all", value_parser = clap::value_parser!(u8).range(1..=4))]
    stage: Option<u8>,
    /// Run stages 1-4 and evaluate.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint and curve directory.
    #[arg(long, default_value = "ckpt")]
    out: PathBuf,
    /// JSON file overriding configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(args: Args) -> lpm_core::Result<()> {
    let mut cfg: LabConfig = match &args.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => LabConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(stage) = args.stage {
        let mut lab = if stage == 1 { Lab::new(cfg)? } else { Lab::load(cfg, &args.out)? };
        let report = lab.run_stage(stage)?;
        lab.save(&args.out)?;
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    if !args.all {
        return Err(lpm_core::LpmError::Config("pass --stage N or --all".into()));
    }
    let start = std::time::Instant::now();
    let mut lab = Lab::new(cfg)?;
    let mut stages = Vec::new();
    for s in 1..=4 {
        let r = lab.run_stage(s)?;
        eprintln!("stage {s}: {:.1}s loss {:.4} -> {:.4}", r.seconds, r.initial_loss, r.final_loss);
        stages.push(r);
    }
    let report = curriculum_report(&lab, stages, start.elapsed().as_secs_f64())?;
    lab.save(&args.out)?;
    std::fs::write(args.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!(
        "modes occupied: {}  mode means: {}  drift improved: {} ({:.1}%)  refiner helps: {}",
        report.modes_occupied(),
        report.mode_means_accurate(),
        report.drift_improved(),
        100.0 * report.drift_improvement,
        report.refiner_helps()
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("distill-lab: {e}");
            ExitCode::FAILURE
        }
    }
}
