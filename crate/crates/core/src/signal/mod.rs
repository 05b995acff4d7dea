//! Time-domain signals, convolution and time-frequency analysis.

mod features;
mod stft;

pub use features::{
    compress_magnitude, extract_t60_features, fit_normalization, CompressedMagnitude, FeatureMap,
    NormStats, LOG_FLOOR, STD_FLOOR,
};
pub use stft::{hamming, istft, stft, ComplexSpectrogram, StftConfig, WindowKind, WSUM_FLOOR};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};
use crate::Scalar;

/// Mono sample buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> AudioSignal<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![T::zero(); len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn fit_to_len(mut self, len: usize) -> Self {
        self.samples.resize(len, T::zero());
        self
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn energy(&self) -> T {
        self.samples.iter().map(|v| *v * *v).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AudioSignal<U> {
        AudioSignal {
            samples: self
                .samples
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

// Above this many multiply-adds the FFT route wins comfortably.
const DIRECT_CONV_LIMIT: usize = 1 << 16;

/// Full linear convolution, `len(a) + len(h) - 1` samples long.
pub fn convolve<T: Scalar>(a: &AudioSignal<T>, h: &[T]) -> Result<AudioSignal<T>> {
    Ok(AudioSignal {
        samples: convolve_slices(a.samples(), h)?,
        sample_rate: a.sample_rate,
    })
}

pub fn convolve_slices<T: Scalar>(a: &[T], h: &[T]) -> Result<Vec<T>> {
    if a.is_empty() || h.is_empty() {
        return Err(invalid("convolution of an empty sequence"));
    }
    if a.len().min(h.len()) <= 16 || a.len() * h.len() <= DIRECT_CONV_LIMIT {
        Ok(convolve_direct(a, h))
    } else {
        Ok(convolve_fft(a, h))
    }
}

fn convolve_direct<T: Scalar>(a: &[T], h: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); a.len() + h.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        if ai == T::zero() {
            continue;
        }
        for (o, &hj) in out[i..].iter_mut().zip(h) {
            *o += ai * hj;
        }
    }
    out
}

fn convolve_fft<T: Scalar>(a: &[T], h: &[T]) -> Vec<T> {
    let out_len = a.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<T>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let lift = |x: &[T]| {
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        buf
    };
    let mut fa = lift(a);
    let mut fh = lift(h);
    fwd.process(&mut fa);
    fwd.process(&mut fh);
    for (x, y) in fa.iter_mut().zip(&fh) {
        *x = *x * *y;
    }
    inv.process(&mut fa);
    let scale = T::one() / T::of_usize(n);
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(v: &[f64]) -> AudioSignal<f64> {
        AudioSignal::new(v.to_vec(), 8000).unwrap()
    }

    #[test]
    fn small_convolution_by_hand() {
        let y = convolve(&sig(&[1.0, 2.0]), &[1.0, 1.0]).unwrap();
        assert_eq!(y.samples(), &[1.0, 3.0, 2.0]);
    }

    #[test]
    fn unit_impulse_is_identity() {
        let a = sig(&[0.5, -0.25, 0.125, 1.0]);
        let y = convolve(&a, &[1.0]).unwrap();
        assert_eq!(y.samples(), a.samples());
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(convolve(&sig(&[1.0]), &[]).is_err());
        assert!(convolve_slices::<f64>(&[], &[1.0]).is_err());
    }

    #[test]
    fn fft_route_matches_direct() {
        let a: Vec<f64> = (0..3000).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let h: Vec<f64> = (0..700).map(|i| (-(i as f64) / 90.0).exp() * if i % 3 == 0 { 1.0 } else { -0.4 }).collect();
        let fast = convolve_fft(&a, &h);
        let slow = convolve_direct(&a, &h);
        let peak = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() <= 1e-10 * peak);
        }
    }

    #[test]
    fn non_finite_samples_rejected() {
        assert!(AudioSignal::new(vec![0.0, f64::NAN], 8000).is_err());
        assert!(AudioSignal::<f64>::new(vec![0.0], 0).is_err());
    }
}
