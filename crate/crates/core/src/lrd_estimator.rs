//! Log-periodogram estimation of the memory coefficient vector `d`.
//!
//! Near zero frequency an LRD spectrum behaves like `λ^{-2d}`, so an OLS fit
//! of `log I(λ_k)` against `log λ_k` has slope `b = -2d`. The slow-varying
//! factor of the spectrum ends up in the intercept.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::embeddings::{self, EmbeddingError, EmbeddingTable, OovPolicy, SymbolSequence};
use crate::spectral::{self, Periodogram, SpectralError};
use crate::synth_oracle::AutocovFn;

/// Above this many residual degrees of freedom the t-test uses the normal tail.
const NORMAL_APPROX_POINTS: usize = 200;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("xs and ys have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("at least 2 points are needed for a fit, got {0}")]
    TooFewPoints(usize),
    #[error("log-log regression needs strictly positive values; got {value} at index {index}")]
    NonPositive { index: usize, value: f64 },
    #[error("all abscissae are equal; slope is undefined")]
    DegenerateAbscissa,
    #[error(
        "zero power in dimension {dim} at frequency index {bin} (constant or degenerate series)"
    )]
    ZeroPower { dim: usize, bin: usize },
    #[error("pad length {0} must be a power of two and at least 4")]
    PadLength(usize),
    #[error("low-frequency cutoff {m} must lie in [2, {max}]")]
    Cutoff { m: usize, max: usize },
    #[error("periodogram length {found} does not match the configured pad length {expected}")]
    PeriodogramLength { expected: usize, found: usize },
    #[error("covariance matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("covariance shapes are inconsistent: {0}")]
    CovarianceShape(String),
    #[error("lag range is empty")]
    EmptyLags,
    #[error("autocovariance at lag 0 must be positive")]
    NonPositiveVariance,
    #[error("correlation at lag {lag} is {rho}; |rho| must be < 1")]
    Correlation { lag: usize, rho: f64 },
    #[error("mutual information is zero at lag {0} (independent process)")]
    ZeroMutualInfo(usize),
}

/// Which frequency indices enter the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Cutoff {
    /// `k = 1..=L/2`.
    #[default]
    FullBand,
    /// `k = 1..=m`.
    LowFrequency(usize),
}

impl Cutoff {
    /// `LowFrequency(⌊√L⌋)`.
    pub fn sqrt_of(pad_length: usize) -> Self {
        Cutoff::LowFrequency((pad_length as f64).sqrt().floor() as usize)
    }

    pub fn bins(self, pad_length: usize) -> usize {
        match self {
            Cutoff::FullBand => pad_length / 2,
            Cutoff::LowFrequency(m) => m,
        }
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::FullBand => write!(f, "full"),
            Cutoff::LowFrequency(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Abscissa {
    /// `log k`
    #[default]
    Index,
    /// `log λ_k` with `λ_k = 2πk / L`
    Angular,
}

impl FromStr for Abscissa {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "index" => Ok(Abscissa::Index),
            "angular" => Ok(Abscissa::Angular),
            other => Err(format!(
                "unknown abscissa {other:?} (expected index or angular)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorConfig {
    pub pad_length: usize,
    pub cutoff: Cutoff,
    pub abscissa: Abscissa,
}

impl EstimatorConfig {
    /// Full-band regression on `log k`.
    pub fn new(pad_length: usize) -> Self {
        EstimatorConfig {
            pad_length,
            cutoff: Cutoff::FullBand,
            abscissa: Abscissa::Index,
        }
    }

    pub fn with_cutoff(mut self, cutoff: Cutoff) -> Self {
        self.cutoff = cutoff;
        self
    }

    pub fn with_abscissa(mut self, abscissa: Abscissa) -> Self {
        self.abscissa = abscissa;
        self
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let l = self.pad_length;
        if !l.is_power_of_two() || l < 4 {
            return Err(EstimatorError::PadLength(l));
        }
        if let Cutoff::LowFrequency(m) = self.cutoff {
            if m < 2 || m > l / 2 {
                return Err(EstimatorError::Cutoff { m, max: l / 2 });
            }
        }
        Ok(())
    }

    /// Regression abscissae for the selected frequency indices.
    fn abscissae(&self) -> Vec<f64> {
        let scale = match self.abscissa {
            Abscissa::Index => 1.0,
            Abscissa::Angular => 2.0 * std::f64::consts::PI / self.pad_length as f64,
        };
        (1..=self.cutoff.bins(self.pad_length))
            .map(|k| k as f64 * scale)
            .collect()
    }
}

/// Ordinary least squares fit of `log y = a + b log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    /// Two-sided p-value for `slope = 0`.
    pub pvalue: f64,
    pub n_points: usize,
}

pub fn ols_loglog(xs: &[f64], ys: &[f64]) -> Result<OlsFit, EstimatorError> {
    if xs.len() != ys.len() {
        return Err(EstimatorError::LengthMismatch(xs.len(), ys.len()));
    }
    for (index, &value) in xs.iter().chain(ys).enumerate() {
        if value <= 0.0 || value.is_nan() {
            return Err(EstimatorError::NonPositive {
                index: index % xs.len().max(1),
                value,
            });
        }
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    ols(&lx, &ly)
}

/// OLS on already-transformed coordinates.
fn ols(x: &[f64], y: &[f64]) -> Result<OlsFit, EstimatorError> {
    let n = x.len();
    if n < 2 {
        return Err(EstimatorError::TooFewPoints(n));
    }
    let nf = n as f64;
    let x_mean = x.iter().sum::<f64>() / nf;
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let dx = xi - x_mean;
        sxx += dx * dx;
        sxy += dx * (yi - y_mean);
    }
    if sxx <= f64::EPSILON * f64::EPSILON * nf * x_mean.abs().max(1.0) {
        return Err(EstimatorError::DegenerateAbscissa);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;

    let (slope_stderr, pvalue) = if n == 2 {
        (f64::INFINITY, 1.0)
    } else {
        let ssr: f64 = x
            .iter()
            .zip(y)
            .map(|(xi, yi)| {
                let r = yi - intercept - slope * xi;
                r * r
            })
            .sum();
        let dof = n - 2;
        let se = (ssr / dof as f64 / sxx).sqrt();
        (se, slope_pvalue(slope, se, dof))
    };

    Ok(OlsFit {
        intercept,
        slope,
        slope_stderr,
        pvalue,
        n_points: n,
    })
}

fn slope_pvalue(slope: f64, stderr: f64, dof: usize) -> f64 {
    if stderr == 0.0 {
        return if slope == 0.0 { 1.0 } else { 0.0 };
    }
    let t = (slope / stderr).abs();
    let tail = if dof > NORMAL_APPROX_POINTS {
        Normal::standard().sf(t)
    } else {
        StudentsT::new(0.0, 1.0, dof as f64)
            .expect("positive degrees of freedom")
            .sf(t)
    };
    (2.0 * tail).clamp(0.0, 1.0)
}

/// Per-dimension memory coefficients with their regression diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LrdEstimate {
    pub d: Vec<f64>,
    pub intercept: Vec<f64>,
    pub slope_stderr: Vec<f64>,
    pub pvalue: Vec<f64>,
    pub cutoff_used: usize,
}

impl LrdEstimate {
    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn mean_d(&self) -> f64 {
        self.d.iter().sum::<f64>() / self.d.len() as f64
    }

    pub fn report(&self, config: &EstimatorConfig) -> EstimateReport {
        EstimateReport {
            schema_version: REPORT_SCHEMA_VERSION,
            dim: self.dim(),
            cutoff: self.cutoff_used,
            abscissa: config.abscissa,
            d: self.d.clone(),
            intercept: self.intercept.clone(),
            stderr: self.slope_stderr.clone(),
            pvalue: self.pvalue.clone(),
        }
    }
}

/// JSON form of an [`LrdEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub dim: usize,
    pub cutoff: usize,
    pub abscissa: Abscissa,
    pub d: Vec<f64>,
    pub intercept: Vec<f64>,
    pub stderr: Vec<f64>,
    pub pvalue: Vec<f64>,
}

/// Fits each periodogram column and reports `d = -slope / 2`. Estimates are
/// not clamped to `(0, 1/2)`.
pub fn estimate_from_periodogram(
    pg: &Periodogram,
    config: &EstimatorConfig,
) -> Result<LrdEstimate, EstimatorError> {
    config.validate()?;
    if pg.length() != config.pad_length {
        return Err(EstimatorError::PeriodogramLength {
            expected: config.pad_length,
            found: pg.length(),
        });
    }
    let xs: Vec<f64> = config.abscissae().iter().map(|x| x.ln()).collect();
    let m = xs.len();

    let mut est = LrdEstimate {
        d: Vec::with_capacity(pg.dim()),
        intercept: Vec::with_capacity(pg.dim()),
        slope_stderr: Vec::with_capacity(pg.dim()),
        pvalue: Vec::with_capacity(pg.dim()),
        cutoff_used: m,
    };
    let mut ys = vec![0.0; m];
    for j in 0..pg.dim() {
        for (k, (y, &power)) in ys.iter_mut().zip(pg.column(j).iter()).enumerate() {
            if power <= 0.0 {
                return Err(EstimatorError::ZeroPower { dim: j, bin: k + 1 });
            }
            *y = power.ln();
        }
        let fit = ols(&xs, &ys)?;
        est.d.push(-fit.slope / 2.0);
        est.intercept.push(fit.intercept);
        est.slope_stderr.push(fit.slope_stderr);
        est.pvalue.push(fit.pvalue);
    }
    Ok(est)
}

/// Lookup, left zero-padding and periodogram of one symbol sequence.
pub fn sequence_periodogram(
    seq: &SymbolSequence,
    table: &EmbeddingTable,
    config: &EstimatorConfig,
    policy: OovPolicy,
) -> Result<Periodogram, EstimatorError> {
    config.validate()?;
    let series = embeddings::lookup_sequence(table, seq, policy)?;
    let padded = embeddings::pad_to_length(&series, config.pad_length)?;
    Ok(spectral::periodogram(&padded)?)
}

/// End-to-end estimate for one symbol sequence.
pub fn estimate_sequence(
    seq: &SymbolSequence,
    table: &EmbeddingTable,
    config: &EstimatorConfig,
    policy: OovPolicy,
) -> Result<LrdEstimate, EstimatorError> {
    let pg = sequence_periodogram(seq, table, config, policy)?;
    estimate_from_periodogram(&pg, config)
}

pub fn hurst_from_d(d: f64) -> f64 {
    d + 0.5
}

fn log_det_spd(m: &DMatrix<f64>, what: &'static str) -> Result<f64, EstimatorError> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or(EstimatorError::NotPositiveDefinite(what))?;
    Ok(2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>())
}

/// Mutual information between jointly Gaussian blocks `U` and `V`:
/// `½ log(det Σ_U det Σ_V / det Σ)`.
pub fn gaussian_mutual_info(
    sigma_u: &DMatrix<f64>,
    sigma_v: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64, EstimatorError> {
    let (pu, pv) = (sigma_u.nrows(), sigma_v.nrows());
    if !sigma_u.is_square() || !sigma_v.is_square() {
        return Err(EstimatorError::CovarianceShape(
            "block covariances must be square".into(),
        ));
    }
    if sigma.shape() != (pu + pv, pu + pv) {
        return Err(EstimatorError::CovarianceShape(format!(
            "joint covariance is {:?}, expected ({n}, {n})",
            sigma.shape(),
            n = pu + pv
        )));
    }
    let mi = 0.5
        * (log_det_spd(sigma_u, "sigma_u")? + log_det_spd(sigma_v, "sigma_v")?
            - log_det_spd(sigma, "sigma")?);
    Ok(mi.max(0.0))
}

/// Fits `log I(h)` against `log h` where `I(h) = -½ log(1 - ρ(h)²)` is the
/// Gaussian mutual information between `X_t` and `X_{t+h}`. For an LRD
/// process the slope approaches `2(2d - 1)`.
pub fn mi_decay_slope(
    autocov: &AutocovFn,
    lags: RangeInclusive<usize>,
) -> Result<OlsFit, EstimatorError> {
    let var = autocov.at(0);
    if var <= 0.0 {
        return Err(EstimatorError::NonPositiveVariance);
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for h in lags {
        let rho = autocov.at(h) / var;
        if rho.abs() >= 1.0 || rho.is_nan() {
            return Err(EstimatorError::Correlation { lag: h, rho });
        }
        let mi = -0.5 * (-rho * rho).ln_1p();
        if mi <= 0.0 {
            return Err(EstimatorError::ZeroMutualInfo(h));
        }
        xs.push(h as f64);
        ys.push(mi);
    }
    if xs.is_empty() {
        return Err(EstimatorError::EmptyLags);
    }
    ols_loglog(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn ols_exact_collinear() {
        let fit = ols_loglog(&[1.0, 2.0, 4.0], &[8.0, 2.0, 0.5]).unwrap();
        assert!((fit.intercept - 8f64.ln()).abs() < 1e-14);
        assert!((fit.slope + 2.0).abs() < 1e-14);
        assert!(fit.slope_stderr < 1e-12);
        assert_eq!(fit.n_points, 3);
    }

    #[test]
    fn ols_power_law() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.7 * x.powf(-0.8)).collect();
        let fit = ols_loglog(&xs, &ys).unwrap();
        assert!((fit.slope + 0.8).abs() < 1e-12);
    }

    #[test]
    fn ols_matches_normal_equations() {
        // Frozen from a 30-digit evaluation of the closed-form normal
        // equations on (ln x, ln y).
        let fit = ols_loglog(&[1.0, 2.0, 3.0, 4.0], &[2.1, 1.0, 0.9, 0.4]).unwrap();
        assert!((fit.slope - -1.073_376_248_710_104_4).abs() < 1e-12);
        assert!((fit.intercept - 0.782_883_398_953_763_1).abs() < 1e-12);
        assert!((fit.slope_stderr - 0.247_142_478_407_528_46).abs() < 1e-12);
        assert!((fit.pvalue - 0.049_139_236_918_231_51).abs() < 1e-9);
    }

    #[test]
    fn ols_errors() {
        assert!(matches!(
            ols_loglog(&[1.0], &[1.0]),
            Err(EstimatorError::TooFewPoints(1))
        ));
        assert!(matches!(
            ols_loglog(&[1.0, 0.0], &[1.0, 1.0]),
            Err(EstimatorError::NonPositive { index: 1, .. })
        ));
        assert!(matches!(
            ols_loglog(&[1.0, 2.0], &[1.0, -1.0]),
            Err(EstimatorError::NonPositive { index: 1, .. })
        ));
        assert!(matches!(
            ols_loglog(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(EstimatorError::DegenerateAbscissa)
        ));
        assert!(matches!(
            ols_loglog(&[1.0, 2.0], &[1.0]),
            Err(EstimatorError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn two_points_have_no_stderr() {
        let fit = ols_loglog(&[1.0, 2.0], &[1.0, 4.0]).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-14);
        assert!(fit.slope_stderr.is_infinite());
        assert_eq!(fit.pvalue, 1.0);
    }

    fn power_law_pg(l: usize, exponents: &[f64]) -> Periodogram {
        let power = Array2::from_shape_fn((l / 2, exponents.len()), |(k, j)| {
            ((k + 1) as f64).powf(-exponents[j]) * (j + 1) as f64
        });
        Periodogram::from_power(l, power).unwrap()
    }

    #[test]
    fn exact_power_law_gives_half_slope() {
        let pg = power_law_pg(64, &[0.6, 0.2]);
        let est = estimate_from_periodogram(&pg, &EstimatorConfig::new(64)).unwrap();
        assert!((est.d[0] - 0.3).abs() < 1e-12);
        assert!((est.d[1] - 0.1).abs() < 1e-12);
        assert!(est.pvalue.iter().all(|&p| p < 1e-12));
        assert_eq!(est.cutoff_used, 32);
    }

    #[test]
    fn zero_power_is_reported() {
        let mut power = Array2::ones((8, 2));
        power[[3, 1]] = 0.0;
        let pg = Periodogram::from_power(16, power).unwrap();
        let err = estimate_from_periodogram(&pg, &EstimatorConfig::new(16)).unwrap_err();
        assert!(
            matches!(err, EstimatorError::ZeroPower { dim: 1, bin: 4 }),
            "{err}"
        );
        // The bad bin is outside a 3-bin low-frequency window.
        let cfg = EstimatorConfig::new(16).with_cutoff(Cutoff::LowFrequency(3));
        assert!(estimate_from_periodogram(&pg, &cfg).is_ok());
    }

    #[test]
    fn config_validation() {
        assert!(matches!(
            EstimatorConfig::new(1000).validate(),
            Err(EstimatorError::PadLength(1000))
        ));
        let cfg = EstimatorConfig::new(64).with_cutoff(Cutoff::LowFrequency(33));
        assert!(matches!(
            cfg.validate(),
            Err(EstimatorError::Cutoff { m: 33, max: 32 })
        ));
        let cfg = EstimatorConfig::new(64).with_cutoff(Cutoff::LowFrequency(1));
        assert!(cfg.validate().is_err());
        assert_eq!(Cutoff::sqrt_of(2048), Cutoff::LowFrequency(45));
    }

    #[test]
    fn constant_symbol_sequence_is_degenerate() {
        let table = EmbeddingTable::load("a 1 2\nb 3 4\n".as_bytes()).unwrap();
        let seq = SymbolSequence::from_ids(vec![0; 64]).unwrap();
        let err = estimate_sequence(&seq, &table, &EstimatorConfig::new(64), OovPolicy::Zero)
            .unwrap_err();
        assert!(matches!(err, EstimatorError::ZeroPower { .. }), "{err}");
    }

    #[test]
    fn hurst_relation() {
        assert!((hurst_from_d(0.3) - 0.8).abs() < 1e-15);
        assert_eq!(hurst_from_d(0.0), 0.5);
        assert_eq!(hurst_from_d(0.5), 1.0);
    }

    #[test]
    fn mutual_info_cases() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let indep = DMatrix::identity(2, 2);
        assert!(gaussian_mutual_info(&one, &one, &indep).unwrap().abs() < 1e-15);

        let joint = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let mi = gaussian_mutual_info(&one, &one, &joint).unwrap();
        assert!((mi - 0.223_143_551_314_209_76).abs() < 1e-12);

        // Diagonal p = 2 case factorizes into two mono-variate terms.
        let (r1, r2) = (0.3, -0.7);
        let eye = DMatrix::identity(2, 2);
        let mut sigma = DMatrix::identity(4, 4);
        sigma[(0, 2)] = r1;
        sigma[(2, 0)] = r1;
        sigma[(1, 3)] = r2;
        sigma[(3, 1)] = r2;
        let mi = gaussian_mutual_info(&eye, &eye, &sigma).unwrap();
        let expect = -0.5 * (1.0 - r1 * r1).ln() - 0.5 * (1.0 - r2 * r2).ln();
        assert!((mi - expect).abs() < 1e-12);

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            gaussian_mutual_info(&one, &one, &singular),
            Err(EstimatorError::NotPositiveDefinite("sigma"))
        ));
        assert!(matches!(
            gaussian_mutual_info(&one, &one, &DMatrix::identity(3, 3)),
            Err(EstimatorError::CovarianceShape(_))
        ));
    }

    #[test]
    fn white_noise_mi_is_zero() {
        let err = mi_decay_slope(&AutocovFn::white_noise(), 1..=10).unwrap_err();
        assert!(matches!(err, EstimatorError::ZeroMutualInfo(1)));
    }

    #[test]
    fn fgn_mi_slopes() {
        for (h, expect) in [(0.8, -0.8), (0.75, -1.0)] {
            let fit = mi_decay_slope(&AutocovFn::fgn(h).unwrap(), 32..=512).unwrap();
            assert!((fit.slope - expect).abs() <= 0.1, "H={h}: {}", fit.slope);
        }
    }

    #[test]
    fn report_json_fields() {
        let pg = power_law_pg(16, &[0.4]);
        let cfg = EstimatorConfig::new(16);
        let est = estimate_from_periodogram(&pg, &cfg).unwrap();
        let json = serde_json::to_value(est.report(&cfg)).unwrap();
        for key in [
            "schema_version",
            "dim",
            "cutoff",
            "abscissa",
            "d",
            "intercept",
            "stderr",
            "pvalue",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["abscissa"], "index");
        assert_eq!(json["cutoff"], 8);
    }

    fn noisy_pg(seed: u64, l: usize, p: usize) -> Periodogram {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let power = Array2::from_shape_fn((l / 2, p), |(k, _)| {
            ((k + 1) as f64).powf(-0.5) * rng.random_range(0.2..5.0)
        });
        Periodogram::from_power(l, power).unwrap()
    }

    proptest! {
        #[test]
        fn abscissa_only_moves_intercept(seed in any::<u64>(), m in 3usize..=32) {
            let pg = noisy_pg(seed, 64, 3);
            let base = EstimatorConfig::new(64).with_cutoff(Cutoff::LowFrequency(m));
            let a = estimate_from_periodogram(&pg, &base).unwrap();
            let b = estimate_from_periodogram(&pg, &base.with_abscissa(Abscissa::Angular)).unwrap();
            let shift = (2.0 * std::f64::consts::PI / 64.0).ln();
            for j in 0..3 {
                prop_assert!((a.d[j] - b.d[j]).abs() < 1e-10);
                let tol = 1e-9 * a.slope_stderr[j].max(1.0);
                prop_assert!((a.slope_stderr[j] - b.slope_stderr[j]).abs() <= tol);
                prop_assert!((a.pvalue[j] - b.pvalue[j]).abs() < 1e-8);
                let slope = -2.0 * a.d[j];
                prop_assert!(((a.intercept[j] - b.intercept[j]) - slope * shift).abs() < 1e-9);
            }
        }

        #[test]
        fn scaling_series_shifts_intercept(seed in any::<u64>(), c in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0]) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((64, 2), |_| rng.random_range(-1.0..1.0));
            let cfg = EstimatorConfig::new(64);
            let s1 = crate::EmbeddedSeries::new(x.clone()).unwrap();
            let s2 = crate::EmbeddedSeries::new(x * c).unwrap();
            let a = estimate_from_periodogram(&spectral::periodogram(&s1).unwrap(), &cfg).unwrap();
            let b = estimate_from_periodogram(&spectral::periodogram(&s2).unwrap(), &cfg).unwrap();
            for j in 0..2 {
                prop_assert!((a.d[j] - b.d[j]).abs() < 1e-10);
                prop_assert!((a.slope_stderr[j] - b.slope_stderr[j]).abs() < 1e-10);
                prop_assert!((a.pvalue[j] - b.pvalue[j]).abs() < 1e-8);
                prop_assert!((b.intercept[j] - a.intercept[j] - 2.0 * c.abs().ln()).abs() < 1e-9);
            }
        }

        #[test]
        fn collinear_recovery(a in -5.0f64..5.0, b in -3.0f64..3.0, n in 3usize..50) {
            let xs: Vec<f64> = (1..=n).map(|k| k as f64 * 0.7).collect();
            let ys: Vec<f64> = xs.iter().map(|x| (a + b * x.ln()).exp()).collect();
            let fit = ols_loglog(&xs, &ys).unwrap();
            prop_assert!((fit.slope - b).abs() < 1e-10);
            prop_assert!((fit.intercept - a).abs() < 1e-9);
            prop_assert!(fit.slope_stderr < 1e-9);
        }

        #[test]
        fn larger_slope_smaller_pvalue(b1 in 0.0f64..2.0, extra in 0.01f64..2.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (1..=20).map(f64::from).collect();
            let noise: Vec<f64> = (0..20).map(|_| rng.random_range(-0.3..0.3)).collect();
            let fit_with = |b: f64| {
                let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| (-b * x.ln() + e).exp()).collect();
                ols_loglog(&xs, &ys).unwrap()
            };
            // Same residuals, larger |b|.
            let f1 = fit_with(b1);
            let f2 = fit_with(b1 + extra);
            prop_assert!((f1.slope_stderr - f2.slope_stderr).abs() < 1e-9);
            if f1.slope.abs() < f2.slope.abs() {
                prop_assert!(f2.pvalue <= f1.pvalue);
            }
        }
    }
}
