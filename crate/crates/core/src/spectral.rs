//! Real-input DFT and per-dimension periodograms.
//!
//! The forward transform is unnormalized: bin `k` is `Σ_t x_t e^{-2πi k t / L}`.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::embeddings::EmbeddedSeries;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error(
        "transform length {0} is not a power of two; pad the series to a power-of-two length first"
    )]
    NotPowerOfTwo(usize),
    #[error("periodogram list is empty")]
    Empty,
    #[error("periodogram shapes differ: (L={0}, p={1}) vs (L={2}, p={3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("power matrix must have L/2 = {expected} rows, found {found}")]
    BinCount { expected: usize, found: usize },
    #[error("power values must be finite and non-negative")]
    InvalidPower,
}

/// Non-negative-frequency half of the DFT of a real signal: bins `0..=L/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub length: usize,
    pub bins: Vec<Complex64>,
}

/// O(L²) direct evaluation of the DFT, used to check [`rfft`].
pub fn dft_naive(signal: &[f64]) -> ComplexSpectrum {
    let l = signal.len();
    let bins = (0..=l / 2)
        .map(|k| {
            signal
                .iter()
                .enumerate()
                .map(|(t, &x)| {
                    // Reduce k·t mod L before scaling to keep the angle small.
                    let phase = -2.0 * std::f64::consts::PI * ((k * t) % l) as f64 / l as f64;
                    Complex64::from_polar(x, phase)
                })
                .sum()
        })
        .collect();
    ComplexSpectrum { length: l, bins }
}

pub fn rfft(signal: &[f64]) -> Result<ComplexSpectrum, SpectralError> {
    let l = signal.len();
    if !l.is_power_of_two() {
        return Err(SpectralError::NotPowerOfTwo(l));
    }
    let fft = FftPlanner::new().plan_fft_forward(l);
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf.truncate(l / 2 + 1);
    Ok(ComplexSpectrum {
        length: l,
        bins: buf,
    })
}

/// Squared DFT magnitudes at frequency indices `k = 1..=L/2`, one column per
/// embedding dimension. The DC bin is not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Periodogram {
    length: usize,
    power: Array2<f64>,
}

impl Periodogram {
    pub fn from_power(length: usize, power: Array2<f64>) -> Result<Self, SpectralError> {
        if power.nrows() != length / 2 {
            return Err(SpectralError::BinCount {
                expected: length / 2,
                found: power.nrows(),
            });
        }
        if power.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SpectralError::InvalidPower);
        }
        Ok(Periodogram { length, power })
    }

    /// Padded length `L` of the transformed series.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn dim(&self) -> usize {
        self.power.ncols()
    }

    /// Row `k - 1` holds frequency index `k`.
    pub fn power(&self) -> ArrayView2<'_, f64> {
        self.power.view()
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.power.column(j)
    }

    /// CSV with header `k,dim0,…` and one row per frequency index.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "k")?;
        for j in 0..self.dim() {
            write!(out, ",dim{j}")?;
        }
        writeln!(out)?;
        for (i, row) in self.power.outer_iter().enumerate() {
            write!(out, "{}", i + 1)?;
            for v in row {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Periodogram of a series whose length is already the padded length `L`.
pub fn periodogram(series: &EmbeddedSeries) -> Result<Periodogram, SpectralError> {
    let l = series.length();
    if !l.is_power_of_two() {
        return Err(SpectralError::NotPowerOfTwo(l));
    }
    let fft = FftPlanner::new().plan_fft_forward(l);
    let mut power = Array2::zeros((l / 2, series.dim()));
    let mut buf = vec![Complex64::new(0.0, 0.0); l];
    for (col, mut out) in series
        .values()
        .axis_iter(Axis(1))
        .zip(power.axis_iter_mut(Axis(1)))
    {
        for (b, &x) in buf.iter_mut().zip(col.iter()) {
            *b = Complex64::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf[1..=l / 2]) {
            *o = b.norm_sqr();
        }
    }
    Ok(Periodogram { length: l, power })
}

/// Element-wise mean of periodograms sharing `L` and `p`.
pub fn average_periodograms(list: &[Periodogram]) -> Result<Periodogram, SpectralError> {
    let first = list.first().ok_or(SpectralError::Empty)?;
    let mut sum = Array2::<f64>::zeros(first.power.raw_dim());
    for pg in list {
        if pg.length != first.length || pg.dim() != first.dim() {
            return Err(SpectralError::ShapeMismatch(
                first.length,
                first.dim(),
                pg.length,
                pg.dim(),
            ));
        }
        sum += &pg.power;
    }
    sum /= list.len() as f64;
    Ok(Periodogram {
        length: first.length,
        power: sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn close(a: &[Complex64], b: &[Complex64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).norm() <= tol)
    }

    #[test]
    fn naive_dft_hand_cases() {
        assert!(close(
            &dft_naive(&[1.0; 4]).bins,
            &[c(4.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            1e-12
        ));
        assert!(close(
            &dft_naive(&[1.0, 0.0, 0.0, 0.0]).bins,
            &[c(1.0, 0.0); 3],
            1e-12
        ));
        assert!(close(
            &dft_naive(&[0.0, 1.0, 0.0, -1.0]).bins,
            &[c(0.0, 0.0), c(0.0, -2.0), c(0.0, 0.0)],
            1e-12
        ));
    }

    #[test]
    fn rfft_hand_cases() {
        assert!(close(
            &rfft(&[1.0; 4]).unwrap().bins,
            &[c(4.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            1e-12
        ));
        assert!(close(
            &rfft(&[1.0, 0.0, 0.0, 0.0]).unwrap().bins,
            &[c(1.0, 0.0); 3],
            1e-12
        ));
        assert_eq!(rfft(&[0.0; 6]), Err(SpectralError::NotPowerOfTwo(6)));
    }

    #[test]
    fn rfft_matches_naive_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = rfft(&x).unwrap();
        let slow = dft_naive(&x);
        for (a, b) in fast.bins.iter().zip(&slow.bins) {
            assert!((a - b).norm() <= 1e-10 * b.norm().max(1.0));
        }
    }

    #[test]
    fn periodogram_hand_cases() {
        let s =
            EmbeddedSeries::new(array![[2.5, 1.0], [2.5, 0.0], [2.5, 0.0], [2.5, 0.0]]).unwrap();
        let pg = periodogram(&s).unwrap();
        assert_eq!(pg.power().nrows(), 2);
        assert!(pg.column(0).iter().all(|v| v.abs() < 1e-24));
        assert!(pg.column(1).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn periodogram_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values = Array2::from_shape_fn((2048, 4), |_| rng.random_range(-1.0..1.0));
        let s = EmbeddedSeries::new(values.clone()).unwrap();
        let pg = periodogram(&s).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = values.column(j).to_vec();
            let naive = dft_naive(&col);
            for k in 1..=1024 {
                let expect = naive.bins[k].norm_sqr();
                assert!((pg.power()[[k - 1, j]] - expect).abs() <= 1e-9 * expect.max(1.0));
            }
        }
    }

    #[test]
    fn averaging() {
        let a = Periodogram::from_power(4, Array2::zeros((2, 3))).unwrap();
        let b = Periodogram::from_power(4, Array2::from_elem((2, 3), 2.0)).unwrap();
        assert_eq!(average_periodograms(std::slice::from_ref(&b)).unwrap(), b);
        let m = average_periodograms(&[a, b]).unwrap();
        assert!(m.power().iter().all(|&v| v == 1.0));
        assert_eq!(average_periodograms(&[]), Err(SpectralError::Empty));
        let c = Periodogram::from_power(8, Array2::zeros((4, 3))).unwrap();
        assert!(matches!(
            average_periodograms(&[m, c]),
            Err(SpectralError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn white_noise_mean_power_is_length() {
        use rand_distr::StandardNormal;
        let l = 1024;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pgs: Vec<_> = (0..100)
            .map(|_| {
                let x: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
                periodogram(&EmbeddedSeries::from_column(&x).unwrap()).unwrap()
            })
            .collect();
        let avg = average_periodograms(&pgs).unwrap();
        let within = avg
            .column(0)
            .iter()
            .filter(|&&v| (v / l as f64 - 1.0).abs() <= 0.3)
            .count();
        // Per-bin relative sd is 1/√100 = 0.1; 3 sd covers > 99% of bins.
        assert!(within as f64 >= 0.95 * (l / 2) as f64, "{within}");
        let overall = avg.column(0).mean().unwrap() / l as f64;
        assert!((overall - 1.0).abs() < 0.1, "{overall}");
    }

    #[test]
    fn csv_dump() {
        let pg = Periodogram::from_power(4, array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut out = Vec::new();
        pg.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "k,dim0,dim1\n1,1e0,2e0\n2,3e0,4e0\n");
    }

    proptest! {
        #[test]
        fn parseval(log_l in 1u32..9, seed in any::<u64>()) {
            let l = 1usize << log_l;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..l).map(|_| rng.random_range(-5.0..5.0)).collect();
            let bins = rfft(&x).unwrap().bins;
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let mid: f64 = bins[1..l / 2].iter().map(|b| b.norm_sqr()).sum();
            let spec = (bins[0].norm_sqr() + bins[l / 2].norm_sqr() + 2.0 * mid) / l as f64;
            prop_assert!((energy - spec).abs() <= 1e-9 * energy.max(1e-300));
        }

        #[test]
        fn linearity(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let (fx, fy, fm) = (rfft(&x).unwrap(), rfft(&y).unwrap(), rfft(&mix).unwrap());
            for k in 0..fm.bins.len() {
                prop_assert!((fm.bins[k] - (fx.bins[k] * a + fy.bins[k] * b)).norm() <= 1e-10 * 64.0);
            }
        }

        #[test]
        fn rfft_equals_naive(log_l in 1u32..9, seed in any::<u64>()) {
            let l = 1usize << log_l;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = rfft(&x).unwrap();
            let slow = dft_naive(&x);
            let scale = slow.bins.iter().map(|b| b.norm()).fold(0.0, f64::max);
            for (f, s) in fast.bins.iter().zip(&slow.bins) {
                prop_assert!((f - s).norm() <= 1e-10 * scale.max(1.0));
            }
        }
    }
}
