//! Quick oracle suite run before training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, Graph, LayerSpec, Mode, Tensor};
use crate::dataset::{additivity_error, synth_speechlike, synthesize_example};
use crate::error::Result;
use crate::losses::loss_pretrain;
use crate::metrics::{mae, mse, pcc, sdr_slices, srcc};
use crate::room::{decompose_rir, measure_t60_schroeder, simulate_rir, RoomSpec};
use crate::signal::{istft, stft, AudioSignal, StftConfig};
use crate::t60net::T60Vars;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
    pub detail: String,
}

fn below(name: &str, value: Result<f64>, limit: f64) -> CheckResult {
    match value {
        Ok(v) => CheckResult {
            name: name.into(),
            passed: v <= limit,
            value: v,
            limit,
            detail: String::new(),
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            value: f64::NAN,
            limit,
            detail: e.to_string(),
        },
    }
}

fn stft_round_trip() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..48_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sig = AudioSignal::new(x, 8000)?;
    let cfg = StftConfig::standard();
    let y = istft(&stft(&sig, &cfg)?)?;
    let w = cfg.window_len;
    let (a, b) = (&sig.samples()[w..y.len() - w], &y.samples()[w..y.len() - w]);
    let num: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    let den: f64 = a.iter().map(|p| p * p).sum();
    Ok((num / den).sqrt())
}

fn layer_grads() -> Result<f64> {
    let cases: Vec<(LayerSpec, Vec<usize>)> = vec![
        (
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 2,
                kernel: 3,
            },
            vec![2, 2, 4, 4],
        ),
        (LayerSpec::Batchnorm { channels: 3 }, vec![4, 3]),
        (LayerSpec::Maxpool2x2, vec![1, 2, 4, 4]),
        (LayerSpec::Avgpool { kernel: 2, stride: 2 }, vec![1, 2, 4, 4]),
        (LayerSpec::FullyConnected { in_dim: 4, out_dim: 3 }, vec![2, 4]),
        (LayerSpec::Lstm { input_dim: 3, hidden: 4 }, vec![4, 2, 3]),
        (LayerSpec::Dropout { rate: 0.5 }, vec![3, 4]),
        (LayerSpec::Relu, vec![3, 4]),
        (LayerSpec::LeakyRelu { slope: 0.1 }, vec![3, 4]),
        (LayerSpec::Softmax, vec![3, 4]),
    ];
    let mut worst: f64 = 0.0;
    for (spec, shape) in cases {
        worst = worst.max(grad_check(&spec, &shape, 5)?);
    }
    Ok(worst)
}

fn perfect_loss_gap() -> Result<f64> {
    let times = [0.3, 0.6, 0.9];
    let t60 = [0.3, 0.9, 0.6];
    let classes = [0, 2, 1];
    let mut z = vec![0.0; 9];
    for (i, &c) in classes.iter().enumerate() {
        z[i * 3 + c] = 60.0;
    }
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let reg = g.constant(Tensor::from_vec(t60.to_vec()));
    let logits = g.constant(Tensor::new(vec![3, 3], z)?);
    let v = T60Vars::from_logits(&mut g, reg, logits, logits, &times)?;
    let l = loss_pretrain(&mut g, &v, &t60, &classes, 0.1, 0.9)?;
    Ok((g.value(l).item() + 4.0).abs())
}

fn metric_examples() -> Result<f64> {
    let mut worst: f64 = 0.0;
    worst = worst.max((pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])? - 0.981_980_506_061_965_7).abs());
    worst = worst.max((srcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])? - 0.8).abs());
    worst = worst.max((mse(&[0.3, 0.9], &[0.6, 0.6])? - 0.09).abs());
    worst = worst.max((mae(&[0.3, 0.9], &[0.6, 0.6])? - 0.3).abs());
    // Reference plus orthogonal noise at a tenth of its energy.
    let r: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut n: Vec<f64> = (0..64).map(|i| (i as f64 * 1.7).cos()).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let proj = r.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>() / rr;
    n.iter_mut().zip(&r).for_each(|(b, a)| *b -= proj * a);
    let nn: f64 = n.iter().map(|v| v * v).sum();
    let k = (0.1 * rr / nn).sqrt();
    let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + k * b).collect();
    worst = worst.max((sdr_slices(&r, &est)? - 10.0).abs());
    Ok(worst)
}

fn partition() -> Result<f64> {
    let room = RoomSpec::new([6.0, 4.0, 3.0], [1.5, 1.0, 1.2], [2.5, 1.2, 1.4])?;
    let parts = decompose_rir(&simulate_rir(&room, 0.6, 8000, None)?)?;
    let clean = synth_speechlike(1.0, 8000, 3)?;
    let out = synthesize_example(&clean, &parts, 1.0)?;
    Ok(additivity_error(
        out.reverberant.samples(),
        out.direct_early.samples(),
        out.late.samples(),
    ))
}

fn schroeder() -> Result<f64> {
    let room = RoomSpec::new([9.0, 8.0, 7.0], [2.0, 2.0, 1.5], [3.0, 2.5, 1.6])?;
    let t = measure_t60_schroeder(&simulate_rir(&room, 0.6, 8000, None)?)?;
    Ok((t - 0.6).abs() / 0.6)
}

/// Every check, in a fixed order.
pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        below("stft_round_trip_relative_error", stft_round_trip(), 1e-6),
        below("layer_gradient_relative_error", layer_grads(), 1e-4),
        below("perfect_prediction_loss_gap", perfect_loss_gap(), 1e-6),
        below("metric_examples_abs_error", metric_examples(), 1e-4),
        below("rir_partition_relative_error", partition(), 1e-6),
        below("schroeder_t60_relative_error", schroeder(), 0.15),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_is_green() {
        for c in super::run_selftest() {
            assert!(c.passed, "{c:?}");
        }
    }
}
