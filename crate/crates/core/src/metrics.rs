//! T60 and waveform evaluation measures.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::AudioSignal;
use crate::Scalar;

pub const SDR_CAP_DB: f64 = 100.0;
pub const REPORT_SCHEMA: u32 = 1;

fn paired(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(invalid(format!("need at least {min} values, got {}", x.len())));
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y, 2)?;
    pcc(&ranks(x), &ranks(y)).map_err(|_| Error::UndefinedCorrelation("zero rank variance"))
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    paired(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    paired(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Single-source projection SDR in dB, capped at [`SDR_CAP_DB`].
pub fn sdr<T: Scalar>(reference: &AudioSignal<T>, estimate: &AudioSignal<T>) -> Result<f64> {
    let r: Vec<f64> = reference.samples().iter().map(|v| v.to_f64_lossy()).collect();
    let e: Vec<f64> = estimate.samples().iter().map(|v| v.to_f64_lossy()).collect();
    sdr_slices(&r, &e)
}

pub fn sdr_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let n = reference.len().min(estimate.len());
    if reference.len() != estimate.len() {
        log::warn!(
            "sdr: trimming to {n} samples (reference {}, estimate {})",
            reference.len(),
            estimate.len()
        );
    }
    let (r, e) = (&reference[..n], &estimate[..n]);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(invalid("silent reference"));
    }
    let k = r.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (&a, &b) in r.iter().zip(e) {
        let s = k * a;
        target += s * s;
        noise += (b - s) * (b - s);
    }
    if noise <= f64::MIN_POSITIVE || target == 0.0 {
        return Ok(if target == 0.0 { -SDR_CAP_DB } else { SDR_CAP_DB });
    }
    Ok((10.0 * (target / noise).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub t60_true: Option<f64>,
    pub t60_reg: Option<f64>,
    pub t60_creg: Option<f64>,
    pub sdr_unprocessed: Option<f64>,
    pub sdr_enhanced: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub mse: f64,
    pub mae: f64,
    pub pcc: Option<f64>,
    pub srcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub t60_reg: Option<BranchStats>,
    pub t60_creg: Option<BranchStats>,
    pub sdr_unprocessed: Option<SdrStats>,
    pub sdr_enhanced: Option<SdrStats>,
}

/// Per-example values plus aggregates derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub records: Vec<ExampleRecord>,
    pub aggregates: Aggregates,
}

fn branch(records: &[ExampleRecord], pick: impl Fn(&ExampleRecord) -> Option<f64>) -> Result<Option<BranchStats>> {
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for r in records {
        if let (Some(a), Some(b)) = (pick(r), r.t60_true) {
            p.push(a);
            t.push(b);
        }
    }
    if p.is_empty() {
        return Ok(None);
    }
    Ok(Some(BranchStats {
        mse: mse(&p, &t)?,
        mae: mae(&p, &t)?,
        pcc: pcc(&p, &t).ok(),
        srcc: srcc(&p, &t).ok(),
    }))
}

fn sdr_stats(records: &[ExampleRecord], pick: impl Fn(&ExampleRecord) -> Option<f64>) -> Option<SdrStats> {
    let v: Vec<f64> = records.iter().filter_map(pick).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    Some(SdrStats { mean, std })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn close_opt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => close(x, y),
        (None, None) => true,
        _ => false,
    }
}

impl Aggregates {
    pub fn compute(records: &[ExampleRecord]) -> Result<Self> {
        Ok(Self {
            t60_reg: branch(records, |r| r.t60_reg)?,
            t60_creg: branch(records, |r| r.t60_creg)?,
            sdr_unprocessed: sdr_stats(records, |r| r.sdr_unprocessed),
            sdr_enhanced: sdr_stats(records, |r| r.sdr_enhanced),
        })
    }

    fn approx_eq(&self, o: &Self) -> bool {
        let b = |x: &Option<BranchStats>, y: &Option<BranchStats>| match (x, y) {
            (Some(x), Some(y)) => {
                close(x.mse, y.mse) && close(x.mae, y.mae) && close_opt(x.pcc, y.pcc) && close_opt(x.srcc, y.srcc)
            }
            (None, None) => true,
            _ => false,
        };
        let s = |x: &Option<SdrStats>, y: &Option<SdrStats>| match (x, y) {
            (Some(x), Some(y)) => close(x.mean, y.mean) && close(x.std, y.std),
            (None, None) => true,
            _ => false,
        };
        b(&self.t60_reg, &o.t60_reg)
            && b(&self.t60_creg, &o.t60_creg)
            && s(&self.sdr_unprocessed, &o.sdr_unprocessed)
            && s(&self.sdr_enhanced, &o.sdr_enhanced)
    }
}

impl MetricReport {
    pub fn from_records(records: Vec<ExampleRecord>) -> Result<Self> {
        let aggregates = Aggregates::compute(&records)?;
        Ok(Self {
            schema_version: REPORT_SCHEMA,
            records,
            aggregates,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a report and checks that its aggregates match its records.
    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA {
            return Err(Error::Format(format!("unsupported report schema {}", r.schema_version)));
        }
        let fresh = Aggregates::compute(&r.records)?;
        if !fresh.approx_eq(&r.aggregates) {
            return Err(Error::Contract("report aggregates do not match its records".into()));
        }
        Ok(r)
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("id,t60_true,t60_reg,t60_creg,sdr_unprocessed,sdr_enhanced\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id,
                f(r.t60_true),
                f(r.t60_reg),
                f(r.t60_creg),
                f(r.sdr_unprocessed),
                f(r.sdr_enhanced)
            ));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        std::fs::write(stem.with_extension("json"), self.to_json()?)?;
        std::fs::write(stem.with_extension("csv"), self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
