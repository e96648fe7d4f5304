//! Estimator checks against synthetic processes with known memory.

use lrd_core::embeddings::EmbeddedSeries;
use lrd_core::lrd_estimator::{
    estimate_from_periodogram, estimate_sequence, Cutoff, EstimatorConfig,
};
use lrd_core::spectral::{average_periodograms, periodogram};
use lrd_core::synth_oracle::{
    fgn_autocov, generate_farima, generate_fgn, quantile_table, quantize_to_symbols,
    shuffle_series, FarimaSpec, FgnSpec,
};
use lrd_core::OovPolicy;

const T: usize = 2048;

fn config() -> EstimatorConfig {
    EstimatorConfig::new(T).with_cutoff(Cutoff::sqrt_of(T))
}

fn fgn(hurst: f64, seed: u64) -> Vec<f64> {
    generate_fgn(&FgnSpec {
        hurst,
        length: T,
        seed,
    })
    .unwrap()
}

fn pooled_d(series: impl Iterator<Item = Vec<f64>>) -> f64 {
    let pgs: Vec<_> = series
        .map(|s| periodogram(&EmbeddedSeries::from_column(&s).unwrap()).unwrap())
        .collect();
    let mean = average_periodograms(&pgs).unwrap();
    estimate_from_periodogram(&mean, &config()).unwrap().d[0]
}

#[test]
fn farima_recovers_d() {
    let d =
        pooled_d((0..200).map(|i| generate_farima(&FarimaSpec::new(0.4, T, 1000 + i)).unwrap()));
    assert!((0.32..=0.48).contains(&d), "d = {d}");
}

#[test]
fn shuffled_fgn_is_short_memory() {
    let d = pooled_d((0..200).map(|i| {
        let s = EmbeddedSeries::from_column(&fgn(0.9, 2000 + i)).unwrap();
        shuffle_series(&s, 7 + i).into_values().column(0).to_vec()
    }));
    assert!(d.abs() <= 0.05, "d = {d}");
}

#[test]
fn quantized_fgn_end_to_end() {
    let table = quantile_table(64).unwrap();
    let mut pgs_sym = Vec::new();
    let mut pgs_real = Vec::new();
    for i in 0..200 {
        let x = fgn(0.8, 3000 + i);
        let seq = quantize_to_symbols(&x, 64, &table).unwrap();
        pgs_sym.push(
            lrd_core::lrd_estimator::sequence_periodogram(&seq, &table, &config(), OovPolicy::Zero)
                .unwrap(),
        );
        pgs_real.push(periodogram(&EmbeddedSeries::from_column(&x).unwrap()).unwrap());
        if i == 0 {
            // Single-sequence path agrees with the pooled one on its own periodogram.
            let one = estimate_sequence(&seq, &table, &config(), OovPolicy::Zero).unwrap();
            let via_pg = estimate_from_periodogram(&pgs_sym[0], &config()).unwrap();
            assert_eq!(one, via_pg);
        }
    }
    let d_sym = estimate_from_periodogram(&average_periodograms(&pgs_sym).unwrap(), &config())
        .unwrap()
        .d[0];
    let d_real = estimate_from_periodogram(&average_periodograms(&pgs_real).unwrap(), &config())
        .unwrap()
        .d[0];
    assert!((d_sym - 0.3).abs() <= 0.08, "quantized d = {d_sym}");
    assert!(
        (d_sym - d_real).abs() <= 0.05,
        "quantized {d_sym} vs real {d_real}"
    );
}

#[test]
fn fgn_sample_autocovariance_matches_closed_form() {
    let hurst = 0.75;
    let len = 1024;
    let reps = 500;
    for lag in [1usize, 2, 4, 8] {
        let samples: Vec<f64> = (0..reps)
            .map(|r| {
                let x = generate_fgn(&FgnSpec {
                    hurst,
                    length: len,
                    seed: 50_000 + r,
                })
                .unwrap();
                // The process mean is known to be zero.
                (0..len - lag).map(|t| x[t] * x[t + lag]).sum::<f64>() / (len - lag) as f64
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / reps as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        let truth = fgn_autocov(hurst, lag).unwrap();
        assert!(
            (mean - truth).abs() <= 4.0 * se,
            "lag {lag}: {mean} vs {truth} (se {se})"
        );
    }
}
