use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use lrd_core::evo_rnn::{
    save_checkpoint, train_toy, EvoRnnError, LagRecallTask, ModelParams, ModelSpec, StepMetrics,
    TrainConfig, DEFAULT_TAIL_EXPONENT,
};
use lrd_core::evo_schedule::{extr_exp_schedule, power_law_schedule, CellSchedule};

use crate::output::{read_file, write_atomic, InputDigest, RunManifest};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Powerlaw,
    Extrexp,
    File,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainToyArgs {
    #[arg(long, value_enum, default_value = "powerlaw")]
    schedule: ScheduleKind,
    /// Schedule JSON for `--schedule file`.
    #[arg(long, required_if_eq("schedule", "file"))]
    schedule_file: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    /// Largest hidden size; the constant schedule uses it everywhere.
    #[arg(long, default_value_t = 32)]
    max_hidden: usize,
    /// Number of segments of the power-law schedule.
    #[arg(long, default_value_t = 5)]
    segments: usize,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    eval_batch_size: usize,
    /// Sampled-softmax negatives; full softmax when absent.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TAIL_EXPONENT)]
    tail_exponent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV: `step,loss,multiply_adds,wall_ms`.
    #[arg(long)]
    metrics_out: PathBuf,
    /// Save the trained model as a JSON checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Record wall_ms as 0 so repeated runs give identical metrics.
    #[arg(long)]
    no_wall_time: bool,
}

fn build_schedule(args: &TrainToyArgs, inputs: &mut Vec<InputDigest>) -> CliResult<CellSchedule> {
    let bad =
        |e: lrd_core::evo_schedule::ScheduleError| CliError::usage(format!("--schedule: {e}"));
    let schedule = match args.schedule {
        ScheduleKind::Constant => {
            CellSchedule::constant(args.seq_len, args.max_hidden).map_err(bad)?
        }
        ScheduleKind::Powerlaw => {
            power_law_schedule(args.seq_len, args.max_hidden, args.segments).map_err(bad)?
        }
        ScheduleKind::Extrexp => extr_exp_schedule(args.seq_len, args.max_hidden).map_err(bad)?,
        ScheduleKind::File => {
            let path = args
                .schedule_file
                .as_ref()
                .expect("clap requires --schedule-file");
            let bytes = read_file(path)?;
            inputs.push(InputDigest::of(path, &bytes));
            let text = String::from_utf8(bytes)
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            CellSchedule::from_json(&text)
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?
        }
    };
    if schedule.total_length() > args.seq_len {
        return Err(CliError::usage(format!(
            "schedule covers {} positions but --seq-len is {}",
            schedule.total_length(),
            args.seq_len
        )));
    }
    Ok(schedule)
}

pub fn run(args: TrainToyArgs) -> CliResult<()> {
    let mut inputs = Vec::new();
    let schedule = build_schedule(&args, &mut inputs)?;
    let task = LagRecallTask::new(args.vocab, args.seq_len, 0, args.tail_exponent)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let config = TrainConfig {
        learning_rate: args.lr,
        clip_norm: args.clip,
        negatives: args.negatives,
        steps: args.steps,
        batch_size: args.batch_size,
        eval_batch_size: args.eval_batch_size,
        seed: args.seed,
        record_wall_time: !args.no_wall_time,
    };
    config
        .validate(args.vocab)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let mut model = ModelParams::init(&ModelSpec::toy(args.vocab, schedule), args.seed)
        .map_err(CliError::runtime)?;

    let history = train_toy(&mut model, &task, &config, |m| {
        if m.step % 500 == 0 {
            eprintln!("step={} loss={:.4}", m.step, m.loss);
        }
    })
    .map_err(|e| match e {
        EvoRnnError::Divergence { step } => {
            CliError::runtime(format!("training diverged at step {step}"))
        }
        other => CliError::runtime(other),
    })?;

    let mut csv = String::from(StepMetrics::CSV_HEADER);
    csv.push('\n');
    for m in &history {
        writeln!(csv, "{}", m.csv_line()).expect("writing to a String");
    }
    write_atomic(&args.metrics_out, csv.as_bytes())?;
    let mut outputs = vec![args.metrics_out.display().to_string()];
    if let Some(path) = &args.checkpoint {
        let mut buf = Vec::new();
        save_checkpoint(&model, &mut buf).map_err(CliError::runtime)?;
        write_atomic(path, &buf)?;
        outputs.push(path.display().to_string());
    }
    let mut manifest = RunManifest::new("train-toy", Some(args.seed), &args);
    manifest.inputs = inputs;
    manifest.outputs = outputs;
    manifest.write_beside(&args.metrics_out)?;

    let last = history.last().expect("history has the initial row");
    let total: u64 = history.iter().map(|m| m.multiply_adds).sum();
    println!("final loss = {:.6}", last.loss);
    println!("total multiply_adds = {total}");
    Ok(())
}
