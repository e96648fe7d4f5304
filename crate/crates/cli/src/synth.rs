use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use lrd_core::synth_oracle::{
    generate_farima, generate_fgn, generate_white, quantile_table, quantize_to_symbols, FarimaSpec,
    FgnSpec,
};

use crate::output::{write_atomic, RunManifest};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Fgn,
    Farima,
    White,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    model: Model,
    /// Memory coefficient d.
    #[arg(long, allow_negative_numbers = true)]
    d: Option<f64>,
    /// Hurst index H = d + 1/2.
    #[arg(long)]
    hurst: Option<f64>,
    #[arg(long, default_value_t = 2048)]
    length: usize,
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Series `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Series CSV (one series per line), or token text with `--vocab`.
    #[arg(long)]
    out: PathBuf,
    /// Quantize into this many equiprobable symbols `s0 … s{V-1}`.
    #[arg(long)]
    vocab: Option<usize>,
    /// Write the quantizer's embedding table (requires `--vocab`).
    #[arg(long)]
    emit_embeddings: Option<PathBuf>,
}

const CONSISTENCY_TOL: f64 = 1e-12;

/// The theoretical d implied by the arguments.
fn resolve_d(args: &SynthArgs) -> CliResult<f64> {
    if let (Some(d), Some(h)) = (args.d, args.hurst) {
        if (d - (h - 0.5)).abs() > CONSISTENCY_TOL {
            return Err(CliError::usage(format!(
                "--d {d} and --hurst {h} are inconsistent (d must equal H - 0.5)"
            )));
        }
    }
    let d = args.d.or(args.hurst.map(|h| h - 0.5));
    match args.model {
        Model::White => match d {
            Some(d) if d.abs() > CONSISTENCY_TOL => Err(CliError::usage(format!(
                "white noise has d = 0, got d = {d}"
            ))),
            _ => Ok(0.0),
        },
        Model::Fgn => {
            let d = d.ok_or_else(|| CliError::usage("fgn needs --hurst or --d"))?;
            if !(d > -0.5 && d < 0.5) {
                return Err(CliError::usage(format!(
                    "fgn needs 0 < H < 1, got H = {}",
                    d + 0.5
                )));
            }
            Ok(d)
        }
        Model::Farima => {
            let d = d.ok_or_else(|| CliError::usage("farima needs --d or --hurst"))?;
            if !(d > -0.5 && d < 0.5) {
                return Err(CliError::usage(format!(
                    "farima needs -1/2 < d < 1/2, got {d}"
                )));
            }
            Ok(d)
        }
    }
}

fn generate(model: Model, d: f64, length: usize, seed: u64) -> CliResult<Vec<f64>> {
    match model {
        Model::Fgn => generate_fgn(&FgnSpec {
            hurst: d + 0.5,
            length,
            seed,
        })
        .map_err(CliError::runtime),
        Model::Farima => {
            generate_farima(&FarimaSpec::new(d, length, seed)).map_err(CliError::runtime)
        }
        Model::White => Ok(generate_white(length, seed)),
    }
}

pub fn run(args: SynthArgs) -> CliResult<()> {
    let d = resolve_d(&args)?;
    if args.length == 0 || args.count == 0 {
        return Err(CliError::usage("--length and --count must be positive"));
    }
    if args.emit_embeddings.is_some() && args.vocab.is_none() {
        return Err(CliError::usage("--emit-embeddings requires --vocab"));
    }
    let table = match args.vocab {
        Some(v) => Some(quantile_table(v).map_err(|e| CliError::usage(format!("--vocab: {e}")))?),
        None => None,
    };

    let mut text = String::new();
    for i in 0..args.count {
        let series = generate(args.model, d, args.length, args.seed.wrapping_add(i))?;
        match (&table, args.vocab) {
            (Some(table), Some(v)) => {
                let seq = quantize_to_symbols(&series, v, table).map_err(CliError::runtime)?;
                let tokens: Vec<String> = seq
                    .ids()
                    .iter()
                    .map(|id| format!("s{}", id.expect("quantizer emits known ids")))
                    .collect();
                text.push_str(&tokens.join(" "));
            }
            _ => {
                for (t, v) in series.iter().enumerate() {
                    if t > 0 {
                        text.push(',');
                    }
                    write!(text, "{v}").expect("writing to a String");
                }
            }
        }
        text.push('\n');
    }
    write_atomic(&args.out, text.as_bytes())?;
    let mut outputs = vec![args.out.display().to_string()];
    if let (Some(path), Some(table)) = (&args.emit_embeddings, &table) {
        let mut buf = Vec::new();
        table.write_text(&mut buf).map_err(CliError::runtime)?;
        write_atomic(path, &buf)?;
        outputs.push(path.display().to_string());
    }
    let mut manifest = RunManifest::new("synth", Some(args.seed), &args);
    manifest.outputs = outputs;
    manifest.write_beside(&args.out)?;

    // Rounded so that e.g. H = 0.8 prints 0.3 rather than 0.30000000000000004.
    let shown = (d * 1e12).round() / 1e12 + 0.0;
    println!("d = {shown}");
    Ok(())
}
