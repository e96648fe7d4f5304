use ndarray::Array2;

use lrd_core::embeddings::{EmbeddingTable, SymbolSequence};
use lrd_core::lrd_estimator::{estimate_sequence, sequence_periodogram, Cutoff, EstimatorConfig};
use lrd_core::spectral::average_periodograms;
use lrd_core::stream_aggregator::{
    ema_init, ema_update, run_dataset, AggregatorError, LearningRateSchedule,
};
use lrd_core::synth_oracle::{
    generate_fgn, quantile_table, quantize_to_symbols, shuffle_in_place, FgnSpec,
};
use lrd_core::OovPolicy;

const T: usize = 2048;
const V: usize = 1024;

fn config() -> EstimatorConfig {
    EstimatorConfig::new(T).with_cutoff(Cutoff::sqrt_of(T))
}

fn fgn_corpus(hurst: f64, count: u64, seed: u64) -> (Vec<SymbolSequence>, EmbeddingTable) {
    let table = quantile_table(V).unwrap();
    let seqs = (0..count)
        .map(|i| {
            let x = generate_fgn(&FgnSpec {
                hurst,
                length: T,
                seed: seed + i,
            })
            .unwrap();
            quantize_to_symbols(&x, V, &table).unwrap()
        })
        .collect();
    (seqs, table)
}

#[test]
fn stream_recovers_fgn_d() {
    let (seqs, table) = fgn_corpus(0.8, 512, 100);
    let mut lines = Vec::new();
    let run = run_dataset(
        seqs,
        &table,
        &config(),
        OovPolicy::Zero,
        &LearningRateSchedule::default(),
        256,
        |p| lines.push(p.to_string()),
    )
    .unwrap();
    assert_eq!(run.estimated, 512);
    assert_eq!(run.skipped, 0);
    assert_eq!(run.state.step(), 2);
    assert_eq!(lines.len(), 2);
    assert!(
        lines[0].starts_with("batch=0 alpha=1 dbar_mean="),
        "{}",
        lines[0]
    );
    let d = run.state.d_hat()[0];
    assert!((d - 0.3).abs() <= 0.05, "d = {d}");
}

#[test]
fn shuffled_stream_is_near_zero() {
    let (mut seqs, table) = fgn_corpus(0.9, 256, 900);
    for (i, s) in seqs.iter_mut().enumerate() {
        let mut ids = s.ids().to_vec();
        shuffle_in_place(&mut ids, i as u64);
        *s = SymbolSequence::new(ids).unwrap();
    }
    let run = run_dataset(
        seqs,
        &table,
        &config(),
        OovPolicy::Zero,
        &LearningRateSchedule::default(),
        128,
        |_| {},
    )
    .unwrap();
    let d = run.state.d_hat()[0];
    assert!(d.abs() <= 0.05, "d = {d}");
}

#[test]
fn single_batch_is_one_update() {
    let (seqs, table) = fgn_corpus(0.7, 10, 5);
    let sched = LearningRateSchedule::new(0.6, 3.0).unwrap();
    let run = run_dataset(
        seqs.clone(),
        &table,
        &config(),
        OovPolicy::Zero,
        &sched,
        10,
        |_| {},
    )
    .unwrap();

    let rows: Vec<f64> = seqs
        .iter()
        .flat_map(|s| {
            estimate_sequence(s, &table, &config(), OovPolicy::Zero)
                .unwrap()
                .d
        })
        .collect();
    let batch = Array2::from_shape_vec((10, 1), rows).unwrap();
    let expect = ema_update(&ema_init(&[0.0]).unwrap(), batch.view(), &sched).unwrap();
    assert_eq!(run.state, expect);

    let pgs: Vec<_> = seqs
        .iter()
        .map(|s| sequence_periodogram(s, &table, &config(), OovPolicy::Zero).unwrap())
        .collect();
    let mean = average_periodograms(&pgs).unwrap();
    let diff = (&mean.power() - &run.mean_periodogram.power())
        .mapv(f64::abs)
        .fold(0.0f64, |a, &b| a.max(b));
    assert!(diff <= 1e-9 * mean.power().fold(0.0f64, |a, &b| a.max(b)));
}

#[test]
fn deterministic_across_runs() {
    let (seqs, table) = fgn_corpus(0.75, 40, 77);
    let go = || {
        run_dataset(
            seqs.clone(),
            &table,
            &config(),
            OovPolicy::Zero,
            &LearningRateSchedule::default(),
            7,
            |_| {},
        )
        .unwrap()
    };
    let (a, b) = (go(), go());
    assert_eq!(a.state, b.state);
    assert_eq!(a.mean_periodogram, b.mean_periodogram);
}

#[test]
fn partial_batches_and_skips() {
    let (mut seqs, table) = fgn_corpus(0.75, 5, 1);
    seqs.push(SymbolSequence::from_ids(vec![3; T]).unwrap());
    let run = run_dataset(
        seqs,
        &table,
        &config(),
        OovPolicy::Zero,
        &LearningRateSchedule::default(),
        4,
        |_| {},
    )
    .unwrap();
    assert_eq!((run.estimated, run.skipped, run.state.step()), (5, 1, 2));
}

#[test]
fn all_constant_stream_fails() {
    let table = quantile_table(V).unwrap();
    let seqs = (0..6).map(|i| SymbolSequence::from_ids(vec![i; T]).unwrap());
    let err = run_dataset(
        seqs,
        &table,
        &config(),
        OovPolicy::Zero,
        &LearningRateSchedule::default(),
        4,
        |_| {},
    )
    .unwrap_err();
    assert!(
        matches!(err, AggregatorError::NothingEstimated { skipped: 6 }),
        "{err}"
    );
}
