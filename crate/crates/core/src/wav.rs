//! Mono WAV input/output (PCM16 and 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{invalid, Result};
use crate::signal::AudioSignal;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a mono file. When `expected_rate` is given, a different rate is an
/// error; no resampling is attempted.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<AudioSignal<T>> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(invalid(format!(
                "{}: sample rate {} Hz does not match expected {} Hz",
                path.display(),
                spec.sample_rate,
                rate
            )));
        }
    }
    let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| T::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| T::lit(v as f64 / 32768.0)))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(invalid(format!(
                "{}: unsupported sample format {fmt:?}/{bits}",
                path.display()
            )))
        }
    };
    AudioSignal::new(samples, spec.sample_rate)
}

pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, signal: &AudioSignal<T>, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for &s in signal.samples() {
        let v = s.to_f64_lossy();
        match encoding {
            WavEncoding::Float32 => writer.write_sample(v as f32)?,
            WavEncoding::Pcm16 => {
                writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x = AudioSignal::new(vec![0.0f64, 0.25, -0.5, 0.125], 8000).unwrap();
        write_wav(&p, &x, WavEncoding::Float32).unwrap();
        let y: AudioSignal<f64> = read_wav(&p, Some(8000)).unwrap();
        assert_eq!(y.samples(), x.samples());
        assert!(read_wav::<f64>(&p, Some(16000)).is_err());
    }

    #[test]
    fn pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let x = AudioSignal::new(vec![0.0f64, 0.5, -0.5, 0.999], 8000).unwrap();
        write_wav(&p, &x, WavEncoding::Pcm16).unwrap();
        let y: AudioSignal<f64> = read_wav(&p, None).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() < 1.0 / 32768.0);
        }
    }
}
