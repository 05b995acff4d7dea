use serde::{Deserialize, Serialize};

use super::ComplexSpectrogram;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

/// Floor added to magnitudes before taking the log.
pub const LOG_FLOOR: f64 = 1e-8;
/// Lower bound on per-row standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// T60 input features: `3F × frames`, row-major (log-magnitude, sin θ, cos θ blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    rows: usize,
    frames: usize,
    values: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(rows: usize, frames: usize, values: Vec<T>, normalized: bool) -> Result<Self> {
        if values.len() != rows * frames {
            return Err(shape_err(&[rows, frames], &[values.len()]));
        }
        Ok(Self {
            rows,
            frames,
            values,
            normalized,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.frames..(r + 1) * self.frames]
    }

    pub fn normalize(&self, stats: &NormStats) -> Result<Self> {
        if stats.mean.len() != self.rows || stats.std.len() != self.rows {
            return Err(shape_err(&[self.rows], &[stats.mean.len()]));
        }
        let mut values = self.values.clone();
        for r in 0..self.rows {
            let m = T::lit(stats.mean[r]);
            let s = T::lit(stats.std[r]);
            for v in &mut values[r * self.frames..(r + 1) * self.frames] {
                *v = (*v - m) / s;
            }
        }
        Ok(Self {
            rows: self.rows,
            frames: self.frames,
            values,
            normalized: true,
        })
    }
}

/// Per-row mean and standard deviation fitted over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Cubic-root compressed magnitudes, stored frame-major (`frames × bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMagnitude<T> {
    bins: usize,
    frames: usize,
    values: Vec<T>,
}

impl<T: Scalar> CompressedMagnitude<T> {
    pub fn new(bins: usize, frames: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != bins * frames {
            return Err(shape_err(&[frames, bins], &[values.len()]));
        }
        if values.iter().any(|v| !(*v >= T::zero())) {
            return Err(invalid("compressed magnitudes must be non-negative"));
        }
        Ok(Self {
            bins,
            frames,
            values,
        })
    }

    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            values: vec![T::zero(); bins * frames],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> T {
        self.values[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[T] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.bins != other.bins || self.frames != other.frames {
            return Err(shape_err(
                &[self.frames, self.bins],
                &[other.frames, other.bins],
            ));
        }
        Ok(())
    }
}

pub fn compress_magnitude<T: Scalar>(spec: &ComplexSpectrogram<T>) -> CompressedMagnitude<T> {
    CompressedMagnitude {
        bins: spec.bins(),
        frames: spec.frames(),
        values: spec.data().iter().map(|c| c.norm().cbrt()).collect(),
    }
}

/// Log-magnitude stacked on sin/cos of the phase, optionally standardised.
pub fn extract_t60_features<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    stats: Option<&NormStats>,
) -> Result<FeatureMap<T>> {
    let f = spec.bins();
    let frames = spec.frames();
    let rows = 3 * f;
    if let Some(s) = stats {
        if s.mean.len() != rows || s.std.len() != rows {
            return Err(shape_err(&[rows], &[s.mean.len()]));
        }
    }
    let floor = T::lit(LOG_FLOOR);
    let mut values = vec![T::zero(); rows * frames];
    for t in 0..frames {
        for (k, c) in spec.frame(t).iter().enumerate() {
            let theta = c.im.atan2(c.re);
            values[k * frames + t] = (c.norm() + floor).ln();
            values[(f + k) * frames + t] = theta.sin();
            values[(2 * f + k) * frames + t] = theta.cos();
        }
    }
    let map = FeatureMap::new(rows, frames, values, false)?;
    match stats {
        Some(s) => map.normalize(s),
        None => Ok(map),
    }
}

/// Pooled per-row statistics over every frame of every map.
///
/// Per-map partial sums are combined in sorted order so the result does not
/// depend on the order of `maps`.
pub fn fit_normalization<T: Scalar>(maps: &[FeatureMap<T>]) -> Result<NormStats> {
    let first = maps
        .first()
        .ok_or_else(|| invalid("cannot fit normalization on an empty collection"))?;
    let rows = first.rows();
    if let Some(m) = maps.iter().find(|m| m.rows() != rows) {
        return Err(shape_err(&[rows], &[m.rows()]));
    }
    let count: usize = maps.iter().map(|m| m.frames()).sum();
    if count == 0 {
        return Err(invalid("feature maps contain no frames"));
    }
    let sorted_sum = |mut parts: Vec<f64>| {
        parts.sort_by(|a, b| a.total_cmp(b));
        parts.into_iter().sum::<f64>()
    };
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for r in 0..rows {
        let total = sorted_sum(
            maps.iter()
                .map(|m| m.row(r).iter().map(|v| v.to_f64_lossy()).sum())
                .collect(),
        );
        let mu = total / count as f64;
        let ss = sorted_sum(
            maps.iter()
                .map(|m| m.row(r).iter().map(|v| (v.to_f64_lossy() - mu).powi(2)).sum())
                .collect(),
        );
        mean.push(mu);
        std.push((ss / count as f64).sqrt().max(STD_FLOOR));
    }
    Ok(NormStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, AudioSignal, StftConfig};
    use rustfft::num_complex::Complex;

    fn spec_from(frames: usize, cfg: StftConfig, f: impl Fn(usize, usize) -> Complex<f64>) -> ComplexSpectrogram<f64> {
        let bins = cfg.n_bins();
        let data = (0..frames)
            .flat_map(|t| (0..bins).map(move |k| (t, k)))
            .map(|(t, k)| f(k, t))
            .collect();
        ComplexSpectrogram::from_frames(cfg, frames, data, 8000).unwrap()
    }

    #[test]
    fn compression_values() {
        let cfg = StftConfig::standard();
        let s = spec_from(1, cfg, |k, _| match k {
            0 => Complex::new(8.0, 0.0),
            1 => Complex::new(0.0, -27.0),
            _ => Complex::new(0.0, 0.0),
        });
        let c = compress_magnitude(&s);
        assert!((c.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((c.get(1, 0) - 3.0).abs() < 1e-12);
        assert_eq!(c.get(2, 0), 0.0);
        for v in c.values() {
            let cubed = v.powi(3);
            let orig = if *v == 2.0 { 8.0 } else if *v == 0.0 { 0.0 } else { cubed };
            assert!((cubed - orig).abs() <= 1e-9 * orig.max(1.0));
        }
    }

    #[test]
    fn standard_config_gives_771_rows() {
        let x = AudioSignal::<f64>::zeros(4000, 8000);
        let f = extract_t60_features(&stft(&x, &StftConfig::standard()).unwrap(), None).unwrap();
        assert_eq!(f.rows(), 771);
        assert_eq!(f.frames(), StftConfig::standard().n_frames(4000));
    }

    #[test]
    fn real_positive_bin_has_zero_phase() {
        let s = spec_from(2, StftConfig::standard(), |_, _| Complex::new(3.0, 0.0));
        let f = extract_t60_features(&s, None).unwrap();
        let bins = 257;
        assert_eq!(f.row(bins)[0], 0.0);
        assert_eq!(f.row(2 * bins)[0], 1.0);
        assert!((f.row(0)[1] - (3.0f64 + LOG_FLOOR).ln()).abs() < 1e-12);
    }

    #[test]
    fn sin_cos_unit_circle() {
        let s = spec_from(3, StftConfig::standard(), |k, t| {
            Complex::new((k as f64 * 0.37 + t as f64).sin(), (k as f64 * 1.3).cos() - 0.2)
        });
        let f = extract_t60_features(&s, None).unwrap();
        for k in 0..257 {
            for t in 0..3 {
                let (si, co) = (f.row(257 + k)[t], f.row(514 + k)[t]);
                assert!((si * si + co * co - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stats_length_mismatch() {
        let s = spec_from(2, StftConfig::standard(), |_, _| Complex::new(1.0, 1.0));
        let stats = NormStats {
            mean: vec![0.0; 10],
            std: vec![1.0; 10],
        };
        assert!(extract_t60_features(&s, Some(&stats)).is_err());
    }

    #[test]
    fn constant_map_floors_std() {
        let m = FeatureMap::new(2, 3, vec![4.0f64; 6], false).unwrap();
        let s = fit_normalization(&[m]).unwrap();
        assert_eq!(s.mean, vec![4.0, 4.0]);
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn two_point_statistics() {
        let a = FeatureMap::new(1, 4, vec![0.0f64; 4], false).unwrap();
        let b = FeatureMap::new(1, 4, vec![2.0f64; 4], false).unwrap();
        let s = fit_normalization(&[a, b]).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn empty_collection_rejected() {
        assert!(fit_normalization::<f64>(&[]).is_err());
    }

    #[test]
    fn order_invariant_and_standardizing() {
        let maps: Vec<FeatureMap<f64>> = (0..5)
            .map(|i| {
                let v = (0..3 * 7).map(|j| ((i * 31 + j * 17) % 23) as f64 * 0.3 - i as f64).collect();
                FeatureMap::new(3, 7, v, false).unwrap()
            })
            .collect();
        let s1 = fit_normalization(&maps).unwrap();
        let mut rev = maps.clone();
        rev.reverse();
        rev.swap(0, 2);
        assert_eq!(s1, fit_normalization(&rev).unwrap());

        let normed: Vec<_> = maps.iter().map(|m| m.normalize(&s1).unwrap()).collect();
        for r in 0..3 {
            let all: Vec<f64> = normed.iter().flat_map(|m| m.row(r).to_vec()).collect();
            let mu = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / all.len() as f64;
            assert!(mu.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }
}
