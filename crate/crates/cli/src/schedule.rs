use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use lrd_core::evo_schedule::{
    build_preset, cost_breakdown, validate_schedule, CellSchedule, Preset, ScheduleError,
};

use crate::output::{read_file, write_json, InputDigest, RunManifest};
use crate::{CliError, CliResult};

#[derive(Debug, Args, Serialize)]
pub struct ScheduleCostArgs {
    /// lm-baseline, lm-powerlaw, lm-exp, seqrec-baseline, seqrec-powerlaw,
    /// seqrec-exp or seqrec-extrexp.
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    preset: Option<String>,
    /// JSON array of `[length, hidden]` pairs, earliest segment first.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Require the segment lengths to sum to this value.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Also write the breakdown as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: ScheduleCostArgs) -> CliResult<()> {
    let mut inputs = Vec::new();
    let schedule = match (&args.preset, &args.file) {
        (Some(name), _) => {
            let preset: Preset = name.parse().map_err(|e: ScheduleError| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                CliError::usage(format!("{e}; expected one of {}", names.join(", ")))
            })?;
            build_preset(preset)
        }
        (None, Some(path)) => {
            let bytes = read_file(path)?;
            inputs.push(InputDigest::of(path, &bytes));
            let text = String::from_utf8(bytes)
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            CellSchedule::from_json(&text)
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?
        }
        (None, None) => unreachable!("clap requires --preset or --file"),
    };
    let breakdown = match args.seq_len {
        Some(len) => validate_schedule(&schedule, len),
        None => cost_breakdown(&schedule),
    }
    .map_err(CliError::runtime)?;

    println!(
        "{:>8} {:>8} {:>8} {:>16}",
        "segment", "length", "hidden", "multiply_adds"
    );
    for (i, seg) in breakdown.segments.iter().enumerate() {
        println!(
            "{i:>8} {:>8} {:>8} {:>16}",
            seg.length, seg.hidden, seg.cost
        );
    }
    println!("total {}", breakdown.total);

    if let Some(out) = &args.out {
        write_json(out, &breakdown)?;
        let mut manifest = RunManifest::new("schedule-cost", None, &args);
        manifest.inputs = inputs;
        manifest.outputs = vec![out.display().to_string()];
        manifest.write_beside(out)?;
    }
    Ok(())
}
