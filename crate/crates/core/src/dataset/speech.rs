use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::signal::AudioSignal;

pub const SPEECHLIKE_PEAK: f64 = 0.5;

/// Two-pole resonator, unity gain at its centre.
#[derive(Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, f: f64, bw: f64, fs: f64) -> f64 {
        let r = (-PI * bw / fs).exp();
        let a1 = -2.0 * r * (2.0 * PI * f / fs).cos();
        let a2 = r * r;
        let y = (1.0 - r) * x - a1 * self.y1 - a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

struct Syllable {
    start: usize,
    len: usize,
    amp: f64,
    voiced: bool,
    f0: f64,
    f1: f64,
    f2: f64,
}

/// Amplitude-modulated, formant-filtered noise with ~4 Hz syllable rate.
///
/// Signals of at least half a second carry one pause of 150-300 ms.
pub fn synth_speechlike(duration: f64, fs: u32, seed: u64) -> Result<AudioSignal<f64>> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(invalid(format!("duration must be positive, got {duration}")));
    }
    if fs == 0 {
        return Err(invalid("sample rate must be positive"));
    }
    let fsf = fs as f64;
    let n = (duration * fsf).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pause = if duration >= 0.5 {
        let len = ((rng.gen_range(0.15..0.30) * fsf) as usize).min(n / 3);
        let start = rng.gen_range(0..=n - len);
        Some((start, start + len))
    } else {
        None
    };

    let nyq = fsf / 2.0;
    let mut syllables = Vec::new();
    let mut t = (rng.gen_range(0.0..0.05) * fsf) as usize;
    while t < n {
        if let Some((ps, pe)) = pause {
            if t >= ps && t < pe {
                t = pe;
                continue;
            }
        }
        let mut len = (rng.gen_range(0.12..0.28) * fsf) as usize;
        if let Some((ps, _)) = pause {
            if t < ps {
                len = len.min(ps - t);
            }
        }
        len = len.min(n - t);
        syllables.push(Syllable {
            start: t,
            len,
            amp: rng.gen_range(0.4..1.0),
            voiced: rng.gen_bool(0.7),
            f0: rng.gen_range(90.0..220.0),
            f1: rng.gen_range(300.0..900.0f64).min(0.45 * nyq),
            f2: rng.gen_range(900.0..2500.0f64).min(0.9 * nyq),
        });
        t += len + (rng.gen_range(0.02..0.08) * fsf) as usize;
    }

    let mut out = vec![0.0; n];
    let (mut r1, mut r2) = (Resonator::default(), Resonator::default());
    let mut phase = rng.gen_range(0.0..1.0);
    let mut cursor = 0;
    for s in &syllables {
        // Let the filters run through the gap so their state stays continuous.
        for _ in cursor..s.start {
            let x = 0.05 * rng.gen_range(-1.0..1.0);
            r2.step(r1.step(x, 500.0f64.min(0.45 * nyq), 200.0, fsf), 1500.0f64.min(0.9 * nyq), 300.0, fsf);
        }
        for k in 0..s.len {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            let mut x = 0.3 * noise;
            if s.voiced {
                phase += s.f0 / fsf;
                if phase >= 1.0 {
                    phase -= 1.0;
                    x += 4.0;
                }
            }
            let y = r2.step(r1.step(x, s.f1, 120.0, fsf), s.f2, 200.0, fsf);
            let w = (PI * (k as f64 + 0.5) / s.len as f64).sin();
            out[s.start + k] = s.amp * w * w * y;
        }
        cursor = s.start + s.len;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = SPEECHLIKE_PEAK / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    AudioSignal::new(out, fs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn longest_quiet_run(x: &[f64], thresh: f64) -> usize {
        let (mut best, mut cur) = (0, 0);
        for v in x {
            if v.abs() < thresh {
                cur += 1;
                best = best.max(cur);
            } else {
                cur = 0;
            }
        }
        best
    }

    #[test]
    fn length_and_peak() {
        let s = synth_speechlike(1.3, 8000, 4).unwrap();
        assert_eq!(s.len(), 10400);
        assert!((s.peak() - 0.5).abs() < 1e-12);
        assert_eq!(synth_speechlike(0.01234, 8000, 1).unwrap().len(), 99);
    }

    #[test]
    fn has_a_long_quiet_interval() {
        for seed in 0..20 {
            let s = synth_speechlike(2.0, 8000, seed).unwrap();
            let peak = s.peak();
            assert!(longest_quiet_run(s.samples(), 0.1 * peak) >= 800, "seed {seed}");
        }
    }

    #[test]
    fn syllable_rate_near_4hz() {
        let s = synth_speechlike(6.0, 8000, 9).unwrap();
        // Syllables are separated by runs of exact silence.
        let (mut bursts, mut silent_run) = (0, usize::MAX);
        for &v in s.samples() {
            if v == 0.0 {
                silent_run = silent_run.saturating_add(1);
            } else {
                if silent_run >= 80 {
                    bursts += 1;
                }
                silent_run = 0;
            }
        }
        let rate = bursts as f64 / 6.0;
        assert!((3.0..5.5).contains(&rate), "{rate}");
    }

    #[test]
    fn seeds_are_nearly_uncorrelated() {
        let a = synth_speechlike(2.0, 8000, 100).unwrap();
        let b = synth_speechlike(2.0, 8000, 101).unwrap();
        let r = crate::metrics::pcc(a.samples(), b.samples()).unwrap();
        assert!(r.abs() < 0.2, "{r}");
    }

    #[test]
    fn deterministic_and_rejects_bad_duration() {
        assert_eq!(synth_speechlike(0.7, 8000, 3).unwrap(), synth_speechlike(0.7, 8000, 3).unwrap());
        assert!(synth_speechlike(0.0, 8000, 3).is_err());
        assert!(synth_speechlike(-1.0, 8000, 3).is_err());
    }
}
