use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::AudioSignal;
use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

/// Samples whose accumulated squared-window weight falls below this are
/// left at zero by [`istft`].
pub const WSUM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hamming,
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
}

impl StftConfig {
    /// 480-sample Hamming window, 512-point FFT, 120-sample hop.
    pub const fn standard() -> Self {
        Self {
            window_len: 480,
            fft_size: 512,
            hop: 120,
            window_kind: WindowKind::Hamming,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_len || self.window_len > self.fft_size {
            return Err(invalid(format!(
                "stft config must satisfy 0 < hop <= window_len <= fft_size (got {}/{}/{})",
                self.hop, self.window_len, self.fft_size
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(invalid("fft_size must be even"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples (no centre padding).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Length of the waveform produced by [`istft`] for `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_len
        }
    }

    pub fn window<T: Scalar>(&self) -> Vec<T> {
        match self.window_kind {
            WindowKind::Hamming => hamming(self.window_len),
            WindowKind::Hann => hann(self.window_len),
        }
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// Symmetric Hamming window.
pub fn hamming<T: Scalar>(len: usize) -> Vec<T> {
    if len == 1 {
        return vec![T::one()];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| T::lit(0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))
        .collect()
}

fn hann<T: Scalar>(len: usize) -> Vec<T> {
    if len == 1 {
        return vec![T::one()];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))
        .collect()
}

/// One-sided STFT, stored frame-major: `frames × bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    config: StftConfig,
    frames: usize,
    data: Vec<Complex<T>>,
    sample_rate: u32,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn from_frames(
        config: StftConfig,
        frames: usize,
        data: Vec<Complex<T>>,
        sample_rate: u32,
    ) -> Result<Self> {
        config.validate()?;
        let bins = config.n_bins();
        if data.len() != frames * bins {
            return Err(shape_err(&[frames, bins], &[data.len()]));
        }
        Ok(Self {
            config,
            frames,
            data,
            sample_rate,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex<T> {
        self.data[frame * self.bins() + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex<T>] {
        let b = self.bins();
        &self.data[frame * b..(frame + 1) * b]
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }
}

pub fn stft<T: Scalar>(x: &AudioSignal<T>, cfg: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    cfg.validate()?;
    if x.len() < cfg.window_len {
        return Err(invalid(format!(
            "signal of {} samples is shorter than one {}-sample window",
            x.len(),
            cfg.window_len
        )));
    }
    let frames = cfg.n_frames(x.len());
    let bins = cfg.n_bins();
    let window = cfg.window::<T>();
    let fft = FftPlanner::<T>::new().plan_fft_forward(cfg.fft_size);
    let zero = Complex::new(T::zero(), T::zero());

    let mut buf = vec![zero; cfg.fft_size];
    let mut scratch = vec![zero; fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * bins);
    let samples = x.samples();
    for t in 0..frames {
        let start = t * cfg.hop;
        buf.fill(zero);
        for (b, (&s, &w)) in buf
            .iter_mut()
            .zip(samples[start..start + cfg.window_len].iter().zip(&window))
        {
            b.re = s * w;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram {
        config: *cfg,
        frames,
        data,
        sample_rate: x.sample_rate(),
    })
}

/// Weighted overlap-add inverse with squared-window normalisation.
pub fn istft<T: Scalar>(spec: &ComplexSpectrogram<T>) -> Result<AudioSignal<T>> {
    let cfg = spec.config;
    cfg.validate()?;
    let n = cfg.fft_size;
    let bins = cfg.n_bins();
    let out_len = cfg.synthesis_len(spec.frames);
    let window = cfg.window::<T>();
    let ifft = FftPlanner::<T>::new().plan_fft_inverse(n);
    let zero = Complex::new(T::zero(), T::zero());
    let scale = T::one() / T::of_usize(n);

    let mut out = vec![T::zero(); out_len];
    let mut wsum = vec![T::zero(); out_len];
    let mut buf = vec![zero; n];
    let mut scratch = vec![zero; ifft.get_inplace_scratch_len()];
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        buf[..bins].copy_from_slice(frame);
        // Rebuild the negative frequencies from conjugate symmetry.
        for k in 1..n - bins + 1 {
            buf[n - k] = frame[k].conj();
        }
        buf[0].im = T::zero();
        buf[bins - 1].im = T::zero();
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for (i, &w) in window.iter().enumerate() {
            out[start + i] += buf[i].re * scale * w;
            wsum[start + i] += w * w;
        }
    }
    let floor = T::lit(WSUM_FLOOR);
    for (o, &w) in out.iter_mut().zip(&wsum) {
        *o = if w > floor { *o / w } else { T::zero() };
    }
    AudioSignal::new(out, spec.sample_rate)
}
