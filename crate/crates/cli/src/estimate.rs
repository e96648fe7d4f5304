use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde::Serialize;

use lrd_core::embeddings::{chunk_corpus, EmbeddingTable, SymbolSequence};
use lrd_core::lrd_estimator::{
    estimate_from_periodogram, Abscissa, Cutoff, EstimatorConfig, REPORT_SCHEMA_VERSION,
};
use lrd_core::stream_aggregator::{run_dataset, AggregatorError, LearningRateSchedule};
use lrd_core::synth_oracle::shuffle_in_place;
use lrd_core::OovPolicy;

use crate::output::{read_file, write_atomic, write_json, InputDigest, RunManifest};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffArg {
    Full,
    Sqrt,
    #[serde(untagged)]
    Bins(usize),
}

impl FromStr for CutoffArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(CutoffArg::Full),
            "sqrt" => Ok(CutoffArg::Sqrt),
            _ => s
                .parse()
                .map(CutoffArg::Bins)
                .map_err(|_| format!("expected full, sqrt or a bin count, got {s:?}")),
        }
    }
}

impl CutoffArg {
    fn resolve(self, pad_length: usize) -> Cutoff {
        match self {
            CutoffArg::Full => Cutoff::FullBand,
            CutoffArg::Sqrt => Cutoff::sqrt_of(pad_length),
            CutoffArg::Bins(m) => Cutoff::LowFrequency(m),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    /// Token corpus: one sequence per non-empty line, whitespace-separated.
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding table in text format (`token v1 v2 ...` per line).
    #[arg(long)]
    embeddings: PathBuf,
    /// Padded length L; must be a power of two.
    #[arg(long)]
    pad_length: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value = "zero")]
    oov: OovPolicy,
    /// full, sqrt (⌊√L⌋ bins) or a bin count m.
    #[arg(long, default_value = "full")]
    cutoff: CutoffArg,
    #[arg(long, default_value = "index")]
    abscissa: Abscissa,
    #[arg(long, default_value_t = 1.0)]
    alpha0: f64,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    /// Ignore line breaks and cut the token stream into chunks of this length.
    #[arg(long)]
    chunk_len: Option<usize>,
    /// Shuffle tokens within each sequence before estimating.
    #[arg(long)]
    shuffle: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Write the averaged periodogram as CSV.
    #[arg(long)]
    dump_spectrum: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PooledFit {
    d: Vec<f64>,
    intercept: Vec<f64>,
    stderr: Vec<f64>,
    pvalue: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct EstimateReport {
    schema_version: u32,
    dim: usize,
    cutoff: usize,
    cutoff_mode: CutoffArg,
    abscissa: Abscissa,
    shuffled: bool,
    /// Final EMA estimate.
    d: Vec<f64>,
    mean_d: f64,
    /// Regression on the periodogram averaged over estimated sequences.
    pooled: PooledFit,
    batches: usize,
    estimated: usize,
    skipped: usize,
}

fn read_corpus(path: &Path, bytes: &[u8], chunk_len: Option<usize>) -> CliResult<Vec<Vec<String>>> {
    let lines: Vec<String> = bytes
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    let tokenized = lines
        .iter()
        .map(|l| l.split_whitespace().map(str::to_owned).collect::<Vec<_>>())
        .filter(|t| !t.is_empty());
    Ok(match chunk_len {
        Some(n) => chunk_corpus(tokenized.flatten(), n),
        None => tokenized.collect(),
    })
}

pub fn run(args: EstimateArgs) -> CliResult<()> {
    let config = EstimatorConfig::new(args.pad_length)
        .with_cutoff(args.cutoff.resolve(args.pad_length))
        .with_abscissa(args.abscissa);
    config
        .validate()
        .map_err(|e| CliError::usage(format!("--pad-length/--cutoff: {e}")))?;
    let schedule = LearningRateSchedule::new(args.alpha0, args.tau)
        .map_err(|e| CliError::usage(format!("--alpha0/--tau: {e}")))?;
    if args.batch_size == 0 {
        return Err(CliError::usage("--batch-size must be positive"));
    }
    if args.chunk_len == Some(0) {
        return Err(CliError::usage("--chunk-len must be positive"));
    }

    let table_bytes = read_file(&args.embeddings)?;
    let table = EmbeddingTable::load(table_bytes.as_slice())
        .map_err(|e| CliError::runtime(format!("{}: {e}", args.embeddings.display())))?;
    let corpus_bytes = read_file(&args.corpus)?;
    let chunks = read_corpus(&args.corpus, &corpus_bytes, args.chunk_len)?;

    let mut sequences: Vec<SymbolSequence> = Vec::with_capacity(chunks.len());
    for tokens in &chunks {
        let seq = table.encode(tokens).map_err(CliError::runtime)?;
        sequences.push(if args.shuffle {
            let mut ids = seq.ids().to_vec();
            shuffle_in_place(&mut ids, args.seed.wrapping_add(sequences.len() as u64));
            SymbolSequence::new(ids).map_err(CliError::runtime)?
        } else {
            seq
        });
    }

    let run = run_dataset(
        sequences,
        &table,
        &config,
        args.oov,
        &schedule,
        args.batch_size,
        |p| eprintln!("{p}"),
    )
    .map_err(|e| match e {
        AggregatorError::NothingEstimated { skipped } => {
            CliError::runtime(format!("no estimable sequences ({skipped} skipped)"))
        }
        other => CliError::runtime(other),
    })?;
    let pooled =
        estimate_from_periodogram(&run.mean_periodogram, &config).map_err(CliError::runtime)?;

    let report = EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dim: table.dim(),
        cutoff: pooled.cutoff_used,
        cutoff_mode: args.cutoff,
        abscissa: args.abscissa,
        shuffled: args.shuffle,
        d: run.state.d_hat().to_vec(),
        mean_d: run.state.mean(),
        pooled: PooledFit {
            d: pooled.d,
            intercept: pooled.intercept,
            stderr: pooled.slope_stderr,
            pvalue: pooled.pvalue,
        },
        batches: run.state.step(),
        estimated: run.estimated,
        skipped: run.skipped,
    };
    write_json(&args.out, &report)?;
    let mut outputs = vec![args.out.display().to_string()];
    if let Some(path) = &args.dump_spectrum {
        let mut csv = Vec::new();
        run.mean_periodogram
            .write_csv(&mut csv)
            .map_err(CliError::runtime)?;
        write_atomic(path, &csv)?;
        outputs.push(path.display().to_string());
    }

    let mut manifest = RunManifest::new("estimate", Some(args.seed), &args);
    manifest.inputs = vec![
        InputDigest::of(&args.corpus, &corpus_bytes),
        InputDigest::of(&args.embeddings, &table_bytes),
    ];
    manifest.outputs = outputs;
    manifest.write_beside(&args.out)?;

    println!(
        "mean d = {:.6} over {} sequences ({} skipped)",
        report.mean_d, report.estimated, report.skipped
    );
    Ok(())
}
