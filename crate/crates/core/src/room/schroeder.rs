use super::Rir;
use crate::error::{Error, Result};

const FIT_START_DB: f64 = -5.0;
const FIT_END_DB: f64 = -35.0;
const MIN_RANGE_DB: f64 = 30.0;

/// Backward-integrated energy, normalised to 1 at n = 0.
pub fn energy_decay_curve(taps: &[f64]) -> Vec<f64> {
    let mut edc = vec![0.0; taps.len()];
    let mut acc = 0.0;
    for i in (0..taps.len()).rev() {
        acc += taps[i] * taps[i];
        edc[i] = acc;
    }
    if acc > 0.0 {
        for v in &mut edc {
            *v /= acc;
        }
    }
    edc
}

/// T60 from a least-squares line through the -5..-35 dB part of the EDC.
pub fn measure_t60_schroeder(h: &Rir) -> Result<f64> {
    fit_edc_t60(&energy_decay_curve(&h.taps), h.sample_rate as f64)
}

/// Line fit on a normalised EDC sampled at `fs`.
pub(crate) fn fit_edc_t60(edc: &[f64], fs: f64) -> Result<f64> {
    let floor = edc.iter().rev().find(|v| **v > 0.0).copied().unwrap_or(1.0);
    let range_db = -10.0 * floor.log10();
    if !(range_db >= MIN_RANGE_DB) {
        return Err(Error::InsufficientDecay { range_db });
    }
    let end_db = FIT_END_DB.max(-range_db);

    let (mut n, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, v) in edc.iter().enumerate() {
        if *v <= 0.0 {
            break;
        }
        let db = 10.0 * v.log10();
        if db > FIT_START_DB {
            continue;
        }
        if db < end_db {
            break;
        }
        let t = i as f64 / fs;
        n += 1.0;
        st += t;
        sy += db;
        stt += t * t;
        sty += t * db;
    }
    let denom = n * stt - st * st;
    if n < 2.0 || denom <= 0.0 {
        return Err(Error::InsufficientDecay { range_db });
    }
    let slope = (n * sty - st * sy) / denom;
    if slope >= 0.0 {
        return Err(Error::InsufficientDecay { range_db });
    }
    Ok(-60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_rir(lambda: f64, fs: u32, secs: f64) -> Rir {
        let n = (secs * fs as f64) as usize;
        let taps = (0..n).map(|i| (-lambda * i as f64 / fs as f64).exp()).collect();
        Rir::new(taps, fs, 0.0).unwrap()
    }

    #[test]
    fn exponential_decay_closed_form() {
        for lambda in [5.0, 9.0, 14.0] {
            // 60 dB of energy decay: 20 log10(e) * lambda * t = 60.
            let expected = 6.9078 / lambda;
            let t = measure_t60_schroeder(&exp_rir(lambda, 8000, 2.0 * expected)).unwrap();
            assert!((t - expected).abs() <= 0.02 * expected, "{t} vs {expected}");
        }
    }

    #[test]
    fn scale_invariant() {
        let h = exp_rir(8.0, 8000, 1.5);
        let mut g = h.clone();
        g.taps.iter_mut().for_each(|v| *v *= -37.5);
        let a = measure_t60_schroeder(&h).unwrap();
        let b = measure_t60_schroeder(&g).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn unit_impulse_has_no_decay() {
        let h = Rir::new(vec![1.0, 0.0, 0.0], 8000, 0.3).unwrap();
        assert!(matches!(measure_t60_schroeder(&h), Err(Error::InsufficientDecay { .. })));
    }

    #[test]
    fn edc_non_increasing() {
        let taps: Vec<f64> = (0..500).map(|i| ((i * 37 % 11) as f64 - 5.0) * (-(i as f64) / 100.0).exp()).collect();
        let e = energy_decay_curve(&taps);
        assert!(e.windows(2).all(|w| w[1] <= w[0]));
        assert!((e[0] - 1.0).abs() < 1e-12);
    }
}
