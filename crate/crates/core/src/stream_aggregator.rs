//! Dataset-scale aggregation of per-sequence estimates.
//!
//! Sequences are consumed in mini-batches; each batch is estimated in
//! parallel and folded into the running estimate with
//! `d̂_{i+1} = (1 − α_i) d̂_i + α_i · mean(batch)`.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::embeddings::{EmbeddingTable, OovPolicy, SymbolSequence};
use crate::lrd_estimator::{self, EstimatorConfig, EstimatorError};
use crate::spectral::Periodogram;

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error("initial estimate contains a non-finite value")]
    NonFiniteInit,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch contains a non-finite estimate")]
    NonFiniteBatch,
    #[error("batch has dimension {found}, state has {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("alpha0 must lie in (0, 1], got {0}")]
    Alpha0(f64),
    #[error("tau must be positive, got {0}")]
    Tau(f64),
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("no sequence could be estimated ({skipped} skipped)")]
    NothingEstimated { skipped: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// `α_i = α_0 τ / (τ + i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRateSchedule {
    alpha0: f64,
    tau: f64,
}

impl LearningRateSchedule {
    pub fn new(alpha0: f64, tau: f64) -> Result<Self, AggregatorError> {
        if !(alpha0 > 0.0 && alpha0 <= 1.0) {
            return Err(AggregatorError::Alpha0(alpha0));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(AggregatorError::Tau(tau));
        }
        Ok(LearningRateSchedule { alpha0, tau })
    }

    /// `α_i = 1 / (i + 1)`: the running arithmetic mean of batch means.
    pub fn harmonic() -> Self {
        LearningRateSchedule {
            alpha0: 1.0,
            tau: 1.0,
        }
    }

    pub fn alpha(&self, step: usize) -> f64 {
        self.alpha0 * self.tau / (self.tau + step as f64)
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for LearningRateSchedule {
    fn default() -> Self {
        LearningRateSchedule {
            alpha0: 1.0,
            tau: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    d_hat: Array1<f64>,
    step: usize,
}

impl EmaState {
    pub fn d_hat(&self) -> ArrayView1<'_, f64> {
        self.d_hat.view()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mean(&self) -> f64 {
        self.d_hat.mean().unwrap_or(0.0)
    }
}

pub fn ema_init(d0: &[f64]) -> Result<EmaState, AggregatorError> {
    if d0.iter().any(|v| !v.is_finite()) {
        return Err(AggregatorError::NonFiniteInit);
    }
    Ok(EmaState {
        d_hat: Array1::from(d0.to_vec()),
        step: 0,
    })
}

/// One update with a `B × p` batch of per-sequence estimates.
pub fn ema_update(
    state: &EmaState,
    batch: ArrayView2<'_, f64>,
    schedule: &LearningRateSchedule,
) -> Result<EmaState, AggregatorError> {
    if batch.nrows() == 0 {
        return Err(AggregatorError::EmptyBatch);
    }
    if batch.ncols() != state.d_hat.len() {
        return Err(AggregatorError::DimMismatch {
            expected: state.d_hat.len(),
            found: batch.ncols(),
        });
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(AggregatorError::NonFiniteBatch);
    }
    let alpha = schedule.alpha(state.step);
    // Mean taken relative to the first row and the update written as
    // `d + α(m − d)` so that a constant stream is an exact fixed point.
    let first = batch.row(0);
    let batch_mean = (&batch - &first)
        .mean_axis(Axis(0))
        .expect("non-empty batch")
        + first;
    let d_hat = if alpha == 1.0 {
        batch_mean
    } else {
        &state.d_hat + &((batch_mean - &state.d_hat) * alpha)
    };
    Ok(EmaState {
        d_hat,
        step: state.step + 1,
    })
}

/// Emitted after each applied batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchProgress {
    pub batch: usize,
    pub alpha: f64,
    pub dbar_mean: f64,
    pub estimated: usize,
    pub skipped: usize,
}

impl fmt::Display for BatchProgress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "batch={} alpha={} dbar_mean={}",
            self.batch, self.alpha, self.dbar_mean
        )
    }
}

#[derive(Debug, Clone)]
pub struct DatasetRun {
    pub state: EmaState,
    /// Sequences that produced an estimate.
    pub estimated: usize,
    /// Sequences whose estimation failed (e.g. constant series).
    pub skipped: usize,
    /// Mean periodogram over the estimated sequences.
    pub mean_periodogram: Periodogram,
}

/// Streams `sequences` through the estimator in batches of `batch_size`,
/// starting from `d̂_0 = 0`. A trailing partial batch is processed with its
/// actual size. Batches in which every sequence failed leave the state
/// untouched.
pub fn run_dataset<I>(
    sequences: I,
    table: &EmbeddingTable,
    config: &EstimatorConfig,
    policy: OovPolicy,
    schedule: &LearningRateSchedule,
    batch_size: usize,
    observer: impl FnMut(&BatchProgress),
) -> Result<DatasetRun, AggregatorError>
where
    I: IntoIterator<Item = SymbolSequence>,
{
    let init = ema_init(&vec![0.0; table.dim()])?;
    run_dataset_from(
        init, sequences, table, config, policy, schedule, batch_size, observer,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn run_dataset_from<I>(
    init: EmaState,
    sequences: I,
    table: &EmbeddingTable,
    config: &EstimatorConfig,
    policy: OovPolicy,
    schedule: &LearningRateSchedule,
    batch_size: usize,
    mut observer: impl FnMut(&BatchProgress),
) -> Result<DatasetRun, AggregatorError>
where
    I: IntoIterator<Item = SymbolSequence>,
{
    if batch_size == 0 {
        return Err(AggregatorError::BatchSize);
    }
    config.validate()?;
    let p = table.dim();
    if init.d_hat.len() != p {
        return Err(AggregatorError::DimMismatch {
            expected: p,
            found: init.d_hat.len(),
        });
    }

    let mut state = init;
    let mut estimated = 0;
    let mut skipped = 0;
    let mut power_sum = Array2::<f64>::zeros((config.pad_length / 2, p));
    let mut iter = sequences.into_iter();
    let mut batch_index = 0;

    loop {
        let batch: Vec<SymbolSequence> = iter.by_ref().take(batch_size).collect();
        if batch.is_empty() {
            break;
        }
        // `collect` keeps index order, so the result is independent of
        // scheduling across threads.
        let results: Vec<_> = batch
            .par_iter()
            .map(|seq| {
                let pg = lrd_estimator::sequence_periodogram(seq, table, config, policy)?;
                let est = lrd_estimator::estimate_from_periodogram(&pg, config)?;
                Ok::<_, EstimatorError>((pg, est))
            })
            .collect();

        let mut rows = Vec::with_capacity(batch.len() * p);
        let mut ok = 0;
        for res in results {
            match res {
                Ok((pg, est)) => {
                    power_sum += &pg.power();
                    rows.extend(est.d);
                    ok += 1;
                }
                Err(_) => skipped += 1,
            }
        }
        if ok > 0 {
            let alpha = schedule.alpha(state.step);
            let rows = Array2::from_shape_vec((ok, p), rows).expect("row count tracked");
            state = ema_update(&state, rows.view(), schedule)?;
            estimated += ok;
            observer(&BatchProgress {
                batch: batch_index,
                alpha,
                dbar_mean: state.mean(),
                estimated,
                skipped,
            });
        }
        batch_index += 1;
    }

    if estimated == 0 {
        return Err(AggregatorError::NothingEstimated { skipped });
    }
    power_sum /= estimated as f64;
    let mean_periodogram =
        Periodogram::from_power(config.pad_length, power_sum).map_err(EstimatorError::from)?;
    Ok(DatasetRun {
        state,
        estimated,
        skipped,
        mean_periodogram,
    })
}
