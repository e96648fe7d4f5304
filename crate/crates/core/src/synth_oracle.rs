//! Synthetic series with known memory coefficients, used as ground truth for
//! the estimator: fractional Gaussian noise (FGN), FARIMA(0, d, 0), white
//! noise, row shuffling and a Gaussian-quantile symbol quantizer.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::embeddings::{EmbeddedSeries, EmbeddingTable, SymbolSequence};

/// Largest length for which the exact Cholesky sampler is used as a fallback.
pub const CHOLESKY_MAX_LEN: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("Hurst index {0} must lie in (0, 1)")]
    Hurst(f64),
    #[error("memory coefficient {0} must lie in (-0.5, 0.5)")]
    MemoryCoefficient(f64),
    #[error("series length must be at least {min}, got {got}")]
    Length { min: usize, got: usize },
    #[error("MA truncation must be at least 1")]
    Truncation,
    #[error("circulant embedding has a negative eigenvalue ({0:e}) and length {1} is too large for the Cholesky fallback; use a larger embedding")]
    NegativeEigenvalue(f64, usize),
    #[error("Toeplitz covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("vocabulary size must be at least 2, got {0}")]
    Vocab(usize),
    #[error("table has {rows} rows, expected {vocab}")]
    TableRows { rows: usize, vocab: usize },
    #[error("table first coordinate is not strictly increasing at row {0}")]
    NotMonotone(usize),
}

/// Autocovariance function `h ↦ γ(h)` of a stationary process.
#[derive(Clone)]
pub struct AutocovFn(Arc<dyn Fn(usize) -> f64 + Send + Sync>);

impl AutocovFn {
    pub fn from_fn(f: impl Fn(usize) -> f64 + Send + Sync + 'static) -> Self {
        AutocovFn(Arc::new(f))
    }

    /// Unit-variance FGN with Hurst index `hurst`.
    pub fn fgn(hurst: f64) -> Result<Self, SynthError> {
        check_hurst(hurst)?;
        Ok(Self::from_fn(move |h| fgn_autocov_unchecked(hurst, h)))
    }

    /// `γ(0) = 1`, `γ(h) = 0` otherwise.
    pub fn white_noise() -> Self {
        Self::from_fn(|h| if h == 0 { 1.0 } else { 0.0 })
    }

    pub fn at(&self, h: usize) -> f64 {
        (self.0)(h)
    }
}

impl fmt::Debug for AutocovFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("AutocovFn").finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgnSpec {
    pub hurst: f64,
    pub length: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarimaSpec {
    pub d: f64,
    pub length: usize,
    pub ma_truncation: usize,
    pub seed: u64,
}

impl FarimaSpec {
    /// Uses the default truncation `J = 2T`.
    pub fn new(d: f64, length: usize, seed: u64) -> Self {
        FarimaSpec {
            d,
            length,
            ma_truncation: 2 * length,
            seed,
        }
    }
}

fn check_hurst(hurst: f64) -> Result<(), SynthError> {
    if hurst > 0.0 && hurst < 1.0 {
        Ok(())
    } else {
        Err(SynthError::Hurst(hurst))
    }
}

pub fn fgn_autocov(hurst: f64, h: usize) -> Result<f64, SynthError> {
    check_hurst(hurst)?;
    Ok(fgn_autocov_unchecked(hurst, h))
}

/// `½(|h+1|^{2H} − 2|h|^{2H} + |h−1|^{2H})`, evaluated as
/// `½ h^{2H} [((1+1/h)^{2H} − 1) + ((1−1/h)^{2H} − 1)]` for `h ≥ 1` to avoid
/// cancellation at large lags.
fn fgn_autocov_unchecked(hurst: f64, h: usize) -> f64 {
    if h == 0 {
        return 1.0;
    }
    let a = 2.0 * hurst;
    let hf = h as f64;
    let inv = 1.0 / hf;
    let up = (a * inv.ln_1p()).exp_m1();
    let down = (a * (-inv).ln_1p()).exp_m1();
    0.5 * hf.powf(a) * (up + down)
}

/// Exact FGN sample by circulant embedding (Davies–Harte). Falls back to a
/// Cholesky factorization for `T ≤ 1024` if the embedding is not
/// non-negative definite.
pub fn generate_fgn(spec: &FgnSpec) -> Result<Vec<f64>, SynthError> {
    check_hurst(spec.hurst)?;
    let t = spec.length;
    if t < 2 {
        return Err(SynthError::Length { min: 2, got: t });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = 2 * t;

    let mut row = vec![Complex64::new(0.0, 0.0); m];
    for (k, slot) in row.iter_mut().enumerate() {
        let lag = if k <= t { k } else { m - k };
        *slot = Complex64::new(fgn_autocov_unchecked(spec.hurst, lag), 0.0);
    }
    let fft = FftPlanner::new().plan_fft_forward(m);
    fft.process(&mut row);
    let eig: Vec<f64> = row.iter().map(|c| c.re).collect();
    let scale = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * scale {
        return if t <= CHOLESKY_MAX_LEN {
            generate_gaussian_cholesky(t, |h| fgn_autocov_unchecked(spec.hurst, h), &mut rng)
        } else {
            Err(SynthError::NegativeEigenvalue(min, t))
        };
    }

    let mf = m as f64;
    let mut coef = vec![Complex64::new(0.0, 0.0); m];
    let sd = |k: usize, denom: f64| (eig[k].max(0.0) / denom).sqrt();
    coef[0] = Complex64::new(sd(0, mf) * rng.sample::<f64, _>(StandardNormal), 0.0);
    coef[t] = Complex64::new(sd(t, mf) * rng.sample::<f64, _>(StandardNormal), 0.0);
    for k in 1..t {
        let s = sd(k, 2.0 * mf);
        let z = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * s;
        coef[k] = z;
        coef[m - k] = z.conj();
    }
    fft.process(&mut coef);
    Ok(coef[..t].iter().map(|c| c.re).collect())
}

fn generate_gaussian_cholesky(
    t: usize,
    autocov: impl Fn(usize) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, SynthError> {
    let gamma: Vec<f64> = (0..t).map(autocov).collect();
    let cov = DMatrix::from_fn(t, t, |i, j| gamma[i.abs_diff(j)]);
    let chol = cov.cholesky().ok_or(SynthError::NotPositiveDefinite)?;
    let z = DVector::from_fn(t, |_, _| rng.sample(StandardNormal));
    Ok((chol.l() * z).iter().copied().collect())
}

/// MA(∞) weights of FARIMA(0, d, 0) via `ψ_j = ψ_{j−1} (j − 1 + d) / j`.
pub fn farima_ma_coeffs(d: f64, truncation: usize) -> Vec<f64> {
    let mut psi = Vec::with_capacity(truncation + 1);
    psi.push(1.0);
    for j in 1..=truncation {
        let prev = psi[j - 1];
        psi.push(prev * (j as f64 - 1.0 + d) / j as f64);
    }
    psi
}

/// `x_t = Σ_{j=0}^{J} ψ_j ε_{t−j}` with iid standard normal innovations; the
/// first `J` steps are burn-in.
pub fn generate_farima(spec: &FarimaSpec) -> Result<Vec<f64>, SynthError> {
    if spec.d.is_nan() || spec.d.abs() >= 0.5 {
        return Err(SynthError::MemoryCoefficient(spec.d));
    }
    if spec.ma_truncation < 1 {
        return Err(SynthError::Truncation);
    }
    if spec.length < 1 {
        return Err(SynthError::Length { min: 1, got: 0 });
    }
    let j_max = spec.ma_truncation;
    let psi = farima_ma_coeffs(spec.d, j_max);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let eps: Vec<f64> = (0..spec.length + j_max)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Ok((0..spec.length)
        .map(|t| {
            let now = t + j_max;
            psi.iter().enumerate().map(|(j, w)| w * eps[now - j]).sum()
        })
        .collect())
}

pub fn generate_white(length: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..length).map(|_| rng.sample(StandardNormal)).collect()
}

/// Uniform random permutation (Fisher–Yates), deterministic per seed.
pub fn shuffle_in_place<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
}

/// Randomly permutes the rows of a series.
pub fn shuffle_series(series: &EmbeddedSeries, seed: u64) -> EmbeddedSeries {
    let mut order: Vec<usize> = (0..series.length()).collect();
    shuffle_in_place(&mut order, seed);
    let values = series.values();
    let out = Array2::from_shape_fn((series.length(), series.dim()), |(i, j)| {
        values[[order[i], j]]
    });
    EmbeddedSeries::new(out).expect("permutation of a valid series")
}

fn normal_quantile(q: f64) -> f64 {
    Normal::standard().inverse_cdf(q)
}

/// Interior boundaries `Φ⁻¹(i/V)`, `i = 1..V-1`, of the `V` equiprobable
/// standard-normal buckets.
pub fn quantile_boundaries(vocab: usize) -> Vec<f64> {
    (1..vocab)
        .map(|i| normal_quantile(i as f64 / vocab as f64))
        .collect()
}

/// One-dimensional table whose row `i` is the median of bucket `i`,
/// `Φ⁻¹((i + ½) / V)`.
pub fn quantile_table(vocab: usize) -> Result<EmbeddingTable, SynthError> {
    if vocab < 2 {
        return Err(SynthError::Vocab(vocab));
    }
    let values = Array2::from_shape_fn((vocab, 1), |(i, _)| {
        normal_quantile((i as f64 + 0.5) / vocab as f64)
    });
    Ok(EmbeddingTable::from_matrix(values).expect("finite quantiles"))
}

/// Maps each value to the index of the standard-normal quantile bucket that
/// contains it. `table` must have `vocab` rows with strictly increasing first
/// coordinate, so that embedding the symbols is a monotone map of the input.
pub fn quantize_to_symbols(
    series: &[f64],
    vocab: usize,
    table: &EmbeddingTable,
) -> Result<SymbolSequence, SynthError> {
    if vocab < 2 {
        return Err(SynthError::Vocab(vocab));
    }
    if table.vocab_size() != vocab {
        return Err(SynthError::TableRows {
            rows: table.vocab_size(),
            vocab,
        });
    }
    for i in 1..vocab {
        if table.row(i)[0] <= table.row(i - 1)[0] {
            return Err(SynthError::NotMonotone(i));
        }
    }
    if series.is_empty() {
        return Err(SynthError::Length { min: 1, got: 0 });
    }
    let bounds = quantile_boundaries(vocab);
    let ids = series
        .iter()
        .map(|&x| bounds.partition_point(|&b| b <= x))
        .collect();
    Ok(SymbolSequence::from_ids(ids).expect("non-empty"))
}
