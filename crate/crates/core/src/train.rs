//! Training loops and evaluation for the T60 estimator, the dereverberator
//! and the joint network.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, OptimizerConfig, OptimizerState, Tensor};
use crate::checkpoint::{Checkpoint, EpochRecord, OptimizerRecord};
use crate::dataset::{sub_seed, DatasetManifest, Split, TrainingExample};
use crate::derev::{reconstruct_waveform, sequence_tensor, spectral_subtract, DerevNet, JointNet};
use crate::error::{invalid, Error, Result};
use crate::losses::{loss_joint, loss_pretrain, mse};
use crate::metrics::{self, ExampleRecord, MetricReport};
use crate::signal::{
    compress_magnitude, extract_t60_features, stft, AudioSignal, CompressedMagnitude, FeatureMap, NormStats,
    StftConfig,
};
use crate::t60net::{argmax, check_on_grid, T60Net, T60NetConfig, T60Outputs, T60Vars};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T60TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Also score the training set in eval mode after every epoch.
    #[serde(default)]
    pub eval_train: bool,
    /// Stop once eval-mode training accuracy reaches this value.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for T60TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 50,
            lr: 1e-3,
            alpha: 0.1,
            beta: 0.9,
            seed: 0,
            eval_train: false,
            stop_at_train_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerevTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DerevTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 50,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr_t60: f64,
    pub lr_derev: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Keep the T60 extractor fixed; only the classification block and the
    /// dereverberator are updated.
    #[serde(default)]
    pub freeze_t60_trunk: bool,
}

impl Default for JointTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 64,
            lr_t60: 1e-3,
            lr_derev: 1e-3,
            gamma: 0.5,
            alpha: 0.1,
            seed: 0,
            freeze_t60_trunk: false,
        }
    }
}

impl JointTrainOptions {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("gamma", self.gamma), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{n} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct T60Sample<T> {
    pub id: String,
    pub features: FeatureMap<T>,
    pub t60: f64,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct DerevSample<T> {
    pub id: String,
    pub features: FeatureMap<T>,
    pub mag: CompressedMagnitude<T>,
    pub late: CompressedMagnitude<T>,
    pub t60: f64,
    pub class: usize,
}

fn cast_map<T: Scalar>(m: &FeatureMap<f64>) -> Result<FeatureMap<T>> {
    FeatureMap::new(m.rows(), m.frames(), m.values().iter().map(|&v| T::lit(v)).collect(), m.is_normalized())
}

fn cast_mag<T: Scalar>(m: &CompressedMagnitude<f64>) -> Result<CompressedMagnitude<T>> {
    CompressedMagnitude::new(m.bins(), m.frames(), m.values().iter().map(|&v| T::lit(v)).collect())
}

fn normalized_features<T: Scalar>(x: &AudioSignal<f64>, cfg: &StftConfig, norm: &NormStats) -> Result<FeatureMap<T>> {
    cast_map(&extract_t60_features(&stft(x, cfg)?, Some(norm))?)
}

pub fn t60_sample<T: Scalar>(
    id: &str,
    ex: &TrainingExample<f64>,
    cfg: &StftConfig,
    norm: &NormStats,
    class_times: &[f64],
) -> Result<T60Sample<T>> {
    Ok(T60Sample {
        id: id.to_string(),
        features: normalized_features(&ex.reverberant, cfg, norm)?,
        t60: ex.t60_label,
        class: grid_class(ex.t60_label, class_times)?,
    })
}

pub fn derev_sample<T: Scalar>(
    id: &str,
    ex: &TrainingExample<f64>,
    cfg: &StftConfig,
    norm: &NormStats,
    class_times: &[f64],
) -> Result<DerevSample<T>> {
    let spec = stft(&ex.reverberant, cfg)?;
    Ok(DerevSample {
        id: id.to_string(),
        features: cast_map(&extract_t60_features(&spec, Some(norm))?)?,
        mag: cast_mag(&compress_magnitude(&spec))?,
        late: cast_mag(&compress_magnitude(&stft(&ex.late, cfg)?))?,
        t60: ex.t60_label,
        class: grid_class(ex.t60_label, class_times)?,
    })
}

fn grid_class(t60: f64, grid: &[f64]) -> Result<usize> {
    check_on_grid(t60, grid).map_err(|_| {
        Error::Config(format!("example T60 {t60} s is not one of the network classes {grid:?}"))
    })
}

/// Loads every example of `split`, keeping those whose T60 is in `keep`
/// (all when `None`).
pub fn load_examples(
    m: &DatasetManifest,
    dir: &Path,
    split: Split,
    keep: Option<&[f64]>,
) -> Result<Vec<(String, TrainingExample<f64>)>> {
    let recs: Vec<_> = m
        .split(split)
        .filter(|r| keep.is_none_or(|k| k.iter().any(|&t| (t - r.t60).abs() < 1e-9)))
        .collect();
    recs.par_iter()
        .map(|r| Ok((r.id.clone(), m.load_example(dir, r)?)))
        .collect()
}

fn check_manifest_stft(m: &DatasetManifest, rows: usize) -> Result<()> {
    let r = 3 * m.meta.stft.n_bins();
    if r != rows {
        return Err(Error::Config(format!(
            "dataset STFT gives {r} feature rows, network expects {rows}"
        )));
    }
    Ok(())
}

pub fn load_t60_samples<T: Scalar>(
    m: &DatasetManifest,
    dir: &Path,
    split: Split,
    norm: &NormStats,
    cfg: &T60NetConfig,
) -> Result<Vec<T60Sample<T>>> {
    check_manifest_stft(m, cfg.input_rows)?;
    load_examples(m, dir, split, None)?
        .par_iter()
        .map(|(id, ex)| t60_sample(id, ex, &m.meta.stft, norm, &cfg.class_times))
        .collect()
}

pub fn load_derev_samples<T: Scalar>(
    m: &DatasetManifest,
    dir: &Path,
    split: Split,
    norm: &NormStats,
    class_times: &[f64],
) -> Result<Vec<DerevSample<T>>> {
    load_examples(m, dir, split, Some(&m.meta.derev_t60s))?
        .par_iter()
        .map(|(id, ex)| derev_sample(id, ex, &m.meta.stft, norm, class_times))
        .collect()
}

/// Seeded shuffle into batches; a trailing batch smaller than `min` is
/// merged into its predecessor.
pub fn make_batches(n: usize, batch: usize, min: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch < min.max(1) {
        return Err(Error::Config(format!("batch size {batch} below the minimum of {min}")));
    }
    if n < min {
        return Err(Error::Config(format!("{n} training examples, at least {min} needed")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, &[epoch as u64])));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().unwrap().len() < min {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    Ok(out)
}

fn t60_input<T: Scalar>(net: &T60Net<T>, samples: &[&T60Sample<T>]) -> Result<Tensor<T>> {
    let maps: Vec<_> = samples.iter().map(|s| &s.features).collect();
    net.input_tensor(&maps)
}

/// Eval-mode outputs, in chunks of `batch`.
pub fn predict_t60<T: Scalar>(net: &mut T60Net<T>, maps: &[&FeatureMap<T>], batch: usize) -> Result<Vec<T60Outputs>> {
    let mut out = Vec::with_capacity(maps.len());
    for chunk in maps.chunks(batch.max(1)) {
        out.extend(net.infer(chunk)?);
    }
    Ok(out)
}

/// Composite pretraining loss evaluated on fixed outputs.
pub fn pretrain_loss_of(outs: &[T60Outputs], t60: &[f64], classes: &[usize], times: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    let n = outs.len();
    let h = times.len();
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let reg = g.constant(Tensor::from_vec(outs.iter().map(|o| o.reg_value).collect()));
    let logits = g.constant(Tensor::new(
        vec![n, h],
        outs.iter().flat_map(|o| o.class_logits.iter().copied()).collect(),
    )?);
    let v = T60Vars::from_logits(&mut g, reg, logits, logits, times)?;
    let l = loss_pretrain(&mut g, &v, t60, classes, alpha, beta)?;
    Ok(g.value(l).item())
}

/// Per-branch MSE/MAE/PCC/SRCC and classification accuracy.
pub fn t60_metrics(outs: &[T60Outputs], t60: &[f64], classes: &[usize], prefix: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    let reg: Vec<f64> = outs.iter().map(|o| o.reg_value).collect();
    let creg: Vec<f64> = outs.iter().map(|o| o.creg_value).collect();
    for (name, p) in [("reg", &reg), ("creg", &creg)] {
        let vals = [
            ("mse", metrics::mse(p, t60).ok()),
            ("mae", metrics::mae(p, t60).ok()),
            ("pcc", metrics::pcc(p, t60).ok()),
            ("srcc", metrics::srcc(p, t60).ok()),
        ];
        for (k, v) in vals {
            if let Some(v) = v {
                m.insert(format!("{prefix}{name}_{k}"), v);
            }
        }
    }
    if !outs.is_empty() {
        let hits = outs.iter().zip(classes).filter(|(o, &c)| argmax(&o.class_logits) == c).count();
        m.insert(format!("{prefix}accuracy"), hits as f64 / outs.len() as f64);
    }
    m
}

fn score_t60<T: Scalar>(
    net: &mut T60Net<T>,
    samples: &[T60Sample<T>],
    opts: &T60TrainOptions,
    prefix: &str,
) -> Result<(Option<f64>, BTreeMap<String, f64>)> {
    let maps: Vec<_> = samples.iter().map(|s| &s.features).collect();
    let outs = predict_t60(net, &maps, opts.batch)?;
    let t60: Vec<f64> = samples.iter().map(|s| s.t60).collect();
    let classes: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let loss = if samples.len() >= 2 {
        Some(pretrain_loss_of(&outs, &t60, &classes, &net.cfg.class_times, opts.alpha, opts.beta)?)
    } else {
        None
    };
    Ok((loss, t60_metrics(&outs, &t60, &classes, prefix)))
}

/// RMSprop on the composite pretraining loss. Returns the per-epoch history
/// and the optimizer state.
pub fn fit_t60<T: Scalar>(
    net: &mut T60Net<T>,
    train: &[T60Sample<T>],
    val: &[T60Sample<T>],
    opts: &T60TrainOptions,
) -> Result<(Vec<EpochRecord>, OptimizerState<T>)> {
    let mut opt = OptimizerState::new(OptimizerConfig::rmsprop(opts.lr));
    let mut history = Vec::new();
    if opts.epochs == 0 {
        return Ok((history, opt));
    }
    let params = net.learnable();
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        for (b, idx) in make_batches(train.len(), opts.batch, 2, opts.seed, epoch)?.iter().enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new(Mode::Train, sub_seed(opts.seed, &[epoch as u64, b as u64, 1]));
            let x = g.constant(t60_input(net, &batch)?);
            let v = net.forward(&mut g, x)?;
            let t60: Vec<f64> = batch.iter().map(|s| s.t60).collect();
            let classes: Vec<usize> = batch.iter().map(|s| s.class).collect();
            let loss = loss_pretrain(&mut g, &v, &t60, &classes, opts.alpha, opts.beta)?;
            total += g.value(loss).item().to_f64_lossy() * batch.len() as f64;
            g.backward(loss)?;
            net.store.zero_grad();
            net.store.absorb_grads(&g)?;
            opt.step(&mut net.store, &params)?;
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, mut metrics) = if val.is_empty() {
            (None, BTreeMap::new())
        } else {
            score_t60(net, val, opts, "val_")?
        };
        if opts.eval_train || opts.stop_at_train_accuracy.is_some() {
            let (l, m) = score_t60(net, train, opts, "train_")?;
            if let Some(l) = l {
                metrics.insert("train_eval_loss".into(), l);
            }
            metrics.extend(m);
        }
        info!("t60 epoch {epoch}: train {train_loss:.5} val {val_loss:?}");
        let acc = metrics.get("train_accuracy").copied();
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            metrics,
        });
        if let (Some(target), Some(a)) = (opts.stop_at_train_accuracy, acc) {
            if a >= target {
                break;
            }
        }
    }
    Ok((history, opt))
}

fn late_mse_of<T: Scalar>(net: &mut DerevNet<T>, samples: &[DerevSample<T>], feats: Option<&[Vec<f64>]>) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let est = net.infer(&s.mag, feats.map(|f| f[i].as_slice()))?;
        for (a, b) in est.values().iter().zip(s.late.values()) {
            se += (a.to_f64_lossy() - b.to_f64_lossy()).powi(2);
        }
        n += est.values().len();
    }
    Ok(se / n.max(1) as f64)
}

fn derev_batch<T: Scalar>(samples: &[&DerevSample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let mags: Vec<_> = samples.iter().map(|s| &s.mag).collect();
    let lates: Vec<_> = samples.iter().map(|s| &s.late).collect();
    Ok((sequence_tensor(&mags)?, sequence_tensor(&lates)?))
}

/// Adam on the late-magnitude MSE.
pub fn fit_derev<T: Scalar>(
    net: &mut DerevNet<T>,
    train: &[DerevSample<T>],
    val: &[DerevSample<T>],
    opts: &DerevTrainOptions,
) -> Result<(Vec<EpochRecord>, OptimizerState<T>)> {
    let mut opt = OptimizerState::new(OptimizerConfig::adam(opts.lr));
    let mut history = Vec::new();
    if opts.epochs == 0 {
        return Ok((history, opt));
    }
    let params = net.learnable();
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        for (b, idx) in make_batches(train.len(), opts.batch, 1, opts.seed, epoch)?.iter().enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
            let (xs, ys) = derev_batch(&batch)?;
            let mut g = Graph::new(Mode::Train, sub_seed(opts.seed, &[epoch as u64, b as u64, 2]));
            let x = g.constant(xs);
            let y = g.constant(ys);
            let est = net.forward(&mut g, x, None)?;
            let loss = mse(&mut g, est, y)?;
            total += g.value(loss).item().to_f64_lossy() * batch.len() as f64;
            g.backward(loss)?;
            net.store.zero_grad();
            net.store.absorb_grads(&g)?;
            opt.step(&mut net.store, &params)?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(late_mse_of(net, val, None)?)
        };
        info!("derev epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            metrics: BTreeMap::new(),
        });
    }
    Ok((history, opt))
}

fn joint_inputs<T: Scalar>(net: &JointNet<T>, batch: &[&DerevSample<T>]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let maps: Vec<_> = batch.iter().map(|s| &s.features).collect();
    let (m, l) = derev_batch(batch)?;
    Ok((net.t60.input_tensor(&maps)?, m, l))
}

fn joint_loss_on<T: Scalar>(
    net: &mut JointNet<T>,
    g: &mut Graph<T>,
    batch: &[&DerevSample<T>],
    gamma: f64,
    alpha: f64,
) -> Result<crate::autodiff::Var> {
    let (f, m, l) = joint_inputs(net, batch)?;
    let f = g.constant(f);
    let m = g.constant(m);
    let target = g.constant(l);
    let (v, late) = net.forward(g, f, m)?;
    let t60: Vec<f64> = batch.iter().map(|s| s.t60).collect();
    let classes: Vec<usize> = batch.iter().map(|s| s.class).collect();
    loss_joint(g, &v, &t60, &classes, late, target, gamma, alpha)
}

/// Joint loss of the whole set as one training-mode batch, without
/// touching the network (running statistics included).
pub fn joint_batch_loss<T: Scalar>(net: &JointNet<T>, samples: &[DerevSample<T>], gamma: f64, alpha: f64, seed: u64) -> Result<f64> {
    let mut scratch = net.clone();
    let mut g = Graph::new(Mode::Train, seed);
    let batch: Vec<_> = samples.iter().collect();
    let l = joint_loss_on(&mut scratch, &mut g, &batch, gamma, alpha)?;
    Ok(g.value(l).item().to_f64_lossy())
}

/// Fine-tunes both networks on the joint objective: RMSprop for the T60
/// extractor and classification block, Adam for the dereverberator.
pub fn fit_joint<T: Scalar>(
    net: &mut JointNet<T>,
    train: &[DerevSample<T>],
    val: &[DerevSample<T>],
    opts: &JointTrainOptions,
) -> Result<(Vec<EpochRecord>, OptimizerState<T>, OptimizerState<T>)> {
    opts.validate()?;
    let mut opt_t = OptimizerState::new(OptimizerConfig::rmsprop(opts.lr_t60));
    let mut opt_d = OptimizerState::new(OptimizerConfig::adam(opts.lr_derev));
    let mut history = Vec::new();
    let t_params = if opts.freeze_t60_trunk {
        let frozen = net.t60.extractor_params();
        net.t60.classification_params().into_iter().filter(|p| !frozen.contains(p)).collect()
    } else {
        net.t60.classification_params()
    };
    let d_params = net.derev.learnable();
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        for (b, idx) in make_batches(train.len(), opts.batch, 2, opts.seed, epoch)?.iter().enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new(Mode::Train, sub_seed(opts.seed, &[epoch as u64, b as u64, 3]));
            let loss = joint_loss_on(net, &mut g, &batch, opts.gamma, opts.alpha)?;
            total += g.value(loss).item().to_f64_lossy() * batch.len() as f64;
            g.backward(loss)?;
            net.t60.store.zero_grad();
            net.derev.store.zero_grad();
            net.t60.store.absorb_grads(&g)?;
            net.derev.store.absorb_grads(&g)?;
            opt_t.step(&mut net.t60.store, &t_params)?;
            opt_d.step(&mut net.derev.store, &d_params)?;
        }
        let train_loss = total / train.len() as f64;
        let mut metrics = BTreeMap::new();
        let val_loss = if val.len() >= 2 {
            let maps: Vec<_> = val.iter().map(|s| &s.features).collect();
            let outs = predict_t60(&mut net.t60, &maps, opts.batch)?;
            let t60: Vec<f64> = val.iter().map(|s| s.t60).collect();
            let classes: Vec<usize> = val.iter().map(|s| s.class).collect();
            metrics.extend(t60_metrics(&outs, &t60, &classes, "val_"));
            let feats: Vec<Vec<f64>> = outs.iter().map(|o| o.penultimate.clone()).collect();
            let late = late_mse_of(&mut net.derev, val, Some(&feats))?;
            metrics.insert("val_late_mse".into(), late);
            Some(late)
        } else {
            None
        };
        info!("joint epoch {epoch}: train {train_loss:.6} val late mse {val_loss:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            metrics,
        });
    }
    Ok((history, opt_t, opt_d))
}

pub fn optimizer_record<T: Scalar>(group: &str, s: &OptimizerState<T>) -> OptimizerRecord {
    OptimizerRecord {
        group: group.to_string(),
        config: s.config.clone(),
        steps: s.steps(),
    }
}

/// History as CSV: epoch, losses, then every metric key in sorted order.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let keys: std::collections::BTreeSet<&String> = history.iter().flat_map(|h| h.metrics.keys()).collect();
    let mut s = String::from("epoch,train_loss,val_loss");
    for k in &keys {
        s.push(',');
        s.push_str(k);
    }
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for h in history {
        s.push_str(&format!("{},{},{}", h.epoch, h.train_loss, opt(h.val_loss)));
        for k in &keys {
            s.push(',');
            s.push_str(&opt(h.metrics.get(*k).copied()));
        }
        s.push('\n');
    }
    s
}

/// Records for a T60-only evaluation.
pub fn evaluate_t60<T: Scalar>(net: &mut T60Net<T>, samples: &[T60Sample<T>], batch: usize) -> Result<MetricReport> {
    let maps: Vec<_> = samples.iter().map(|s| &s.features).collect();
    let outs = predict_t60(net, &maps, batch)?;
    let records = samples
        .iter()
        .zip(&outs)
        .map(|(s, o)| ExampleRecord {
            id: s.id.clone(),
            t60_true: Some(s.t60),
            t60_reg: Some(o.reg_value),
            t60_creg: Some(o.creg_value),
            sdr_unprocessed: None,
            sdr_enhanced: None,
        })
        .collect();
    MetricReport::from_records(records)
}

/// Dereverberation using the ground-truth late magnitude in place of the
/// network estimate.
pub fn oracle_enhance(ex: &TrainingExample<f64>, cfg: &StftConfig) -> Result<AudioSignal<f64>> {
    let spec = stft(&ex.reverberant, cfg)?;
    let late = compress_magnitude(&stft(&ex.late, cfg)?);
    let de = spectral_subtract(&compress_magnitude(&spec), &late)?;
    reconstruct_waveform(&de, &spec)
}

/// SDR against the direct-early reference before and after processing.
pub fn sdr_record(id: &str, ex: &TrainingExample<f64>, enhanced: &AudioSignal<f64>) -> Result<ExampleRecord> {
    Ok(ExampleRecord {
        id: id.to_string(),
        t60_true: Some(ex.t60_label),
        t60_reg: None,
        t60_creg: None,
        sdr_unprocessed: Some(metrics::sdr(&ex.direct_early, &ex.reverberant)?),
        sdr_enhanced: Some(metrics::sdr(&ex.direct_early, enhanced)?),
    })
}

/// Enhances every example with the joint network and scores both T60
/// heads and SDR.
pub fn evaluate_joint(net: &JointNet<f64>, examples: &[(String, TrainingExample<f64>)]) -> Result<MetricReport> {
    let records: Result<Vec<_>> = examples
        .par_iter()
        .map(|(id, ex)| {
            let mut local = net.clone();
            let out = crate::derev::enhance(&ex.reverberant, &mut local)?;
            let mut r = sdr_record(id, ex, &out.signal)?;
            r.t60_reg = Some(out.t60.reg_value);
            r.t60_creg = Some(out.t60.creg_value);
            Ok(r)
        })
        .collect();
    MetricReport::from_records(records?)
}

/// Oracle-subtraction report over `examples`.
pub fn evaluate_oracle(examples: &[(String, TrainingExample<f64>)], cfg: &StftConfig) -> Result<MetricReport> {
    let records: Result<Vec<_>> = examples
        .par_iter()
        .map(|(id, ex)| sdr_record(id, ex, &oracle_enhance(ex, cfg)?))
        .collect();
    MetricReport::from_records(records?)
}

/// Checkpoint of a trained T60 network with its preprocessing.
pub fn t60_checkpoint<T: Scalar>(
    net: &T60Net<T>,
    seed: u64,
    history: Vec<EpochRecord>,
    opt: &OptimizerState<T>,
    norm: &NormStats,
    stft_cfg: &StftConfig,
    sample_rate: u32,
) -> Result<Checkpoint> {
    let mut h = net.checkpoint_header(seed);
    h.history = history;
    h.optimizers.push(optimizer_record("t60", opt));
    h.norm_stats = Some(norm.clone());
    h.stft = Some(*stft_cfg);
    h.extra.insert("sample_rate".into(), sample_rate.into());
    let mut ck = Checkpoint::new(h);
    ck.add_store(&net.store)?;
    Ok(ck)
}

pub fn derev_checkpoint<T: Scalar>(
    net: &DerevNet<T>,
    seed: u64,
    history: Vec<EpochRecord>,
    opt: &OptimizerState<T>,
    stft_cfg: &StftConfig,
    sample_rate: u32,
) -> Result<Checkpoint> {
    let mut h = net.checkpoint_header(seed);
    h.history = history;
    h.optimizers.push(optimizer_record("derev", opt));
    h.stft = Some(*stft_cfg);
    h.extra.insert("sample_rate".into(), sample_rate.into());
    let mut ck = Checkpoint::new(h);
    ck.add_store(&net.store)?;
    Ok(ck)
}

/// Restores both pretrained networks and joins them, checking that they
/// were trained on the same front end.
pub fn joint_from_checkpoints<T: Scalar>(t60_ck: &Checkpoint, derev_ck: &Checkpoint) -> Result<JointNet<T>> {
    t60_ck.expect_kind(crate::checkpoint::ModelKind::T60)?;
    derev_ck.expect_kind(crate::checkpoint::ModelKind::Derev)?;
    let t60 = T60Net::from_checkpoint(t60_ck)?;
    let derev = DerevNet::from_checkpoint(derev_ck)?;
    let norm = t60_ck
        .header
        .norm_stats
        .clone()
        .ok_or_else(|| Error::Migration("T60 checkpoint has no normalization statistics".into()))?;
    let stft_cfg = t60_ck
        .header
        .stft
        .ok_or_else(|| Error::Migration("T60 checkpoint has no STFT config".into()))?;
    if derev_ck.header.stft.is_some_and(|s| s != stft_cfg) {
        return Err(Error::Migration(format!(
            "STFT configs differ: T60 {:?}, dereverberation {:?}",
            stft_cfg, derev_ck.header.stft
        )));
    }
    let rate = t60_ck
        .header
        .extra
        .get("sample_rate")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Migration("T60 checkpoint has no sample rate".into()))? as u32;
    JointNet::from_pretrained(t60, derev, norm, stft_cfg, rate)
}

/// Penultimate T60 features as CSV rows `id,t60,f0,f1,...`.
pub fn penultimate_csv(ids: &[String], t60: &[f64], outs: &[T60Outputs]) -> Result<String> {
    if ids.len() != outs.len() || t60.len() != outs.len() {
        return Err(invalid("ids, labels and outputs differ in length"));
    }
    let dim = outs.first().map_or(0, |o| o.penultimate.len());
    let mut s = String::from("id,t60");
    for i in 0..dim {
        s.push_str(&format!(",f{i}"));
    }
    s.push('\n');
    for ((id, t), o) in ids.iter().zip(t60).zip(outs) {
        s.push_str(&format!("{id},{t}"));
        for v in &o.penultimate {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}
