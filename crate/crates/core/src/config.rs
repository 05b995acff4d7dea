//! Sectioned experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::derev::DerevNetConfig;
use crate::error::{Error, Result};
use crate::signal::StftConfig;
use crate::t60net::T60NetConfig;
use crate::train::{DerevTrainOptions, JointTrainOptions, T60TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T60Section {
    pub net: T60NetConfig,
    pub train: T60TrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerevSection {
    pub net: DerevNetConfig,
    pub train: DerevTrainOptions,
}

/// Locations, relative to the output directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset_dir: PathBuf,
    pub t60_checkpoint: PathBuf,
    pub derev_checkpoint: PathBuf,
    pub joint_checkpoint: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset_dir: "dataset".into(),
            t60_checkpoint: "checkpoints/t60.rvtk".into(),
            derev_checkpoint: "checkpoints/derev.rvtk".into(),
            joint_checkpoint: "checkpoints/joint.rvtk".into(),
        }
    }
}

impl PathsConfig {
    pub fn resolve(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub t60: T60Section,
    pub derev: DerevSection,
    pub joint: JointTrainOptions,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    /// Full-scale protocol: 14 rooms, 13 classes, batch 50/64, 100/60 epochs.
    pub fn full() -> Self {
        let dataset = DatasetConfig::full();
        let bins = dataset.stft.n_bins();
        let mut net = T60NetConfig::full();
        net.input_frames = dataset.stft.n_frames(dataset.clip_len());
        Self {
            t60: T60Section {
                net,
                train: T60TrainOptions::default(),
            },
            derev: DerevSection {
                net: DerevNetConfig::full(bins),
                train: DerevTrainOptions::default(),
            },
            joint: JointTrainOptions::default(),
            paths: PathsConfig::default(),
            precision: Precision::F32,
            dataset,
        }
    }

    /// Minutes on one laptop core: one room per side, three T60 values,
    /// narrow networks.
    pub fn desk() -> Self {
        let mut dataset = DatasetConfig::desk();
        dataset.stft = StftConfig {
            window_len: 240,
            fft_size: 256,
            hop: 120,
            ..StftConfig::standard()
        };
        let bins = dataset.stft.n_bins();
        let frames = dataset.stft.n_frames(dataset.clip_len());
        Self {
            t60: T60Section {
                net: T60NetConfig::desk(dataset.t60_grid.clone(), 3 * bins, frames),
                train: T60TrainOptions {
                    epochs: 30,
                    batch: 15,
                    ..T60TrainOptions::default()
                },
            },
            derev: DerevSection {
                net: DerevNetConfig {
                    hidden: 32,
                    lstm_layers: 2,
                    dropout: 0.0,
                    ..DerevNetConfig::full(bins)
                },
                train: DerevTrainOptions {
                    epochs: 30,
                    batch: 15,
                    ..DerevTrainOptions::default()
                },
            },
            joint: JointTrainOptions {
                epochs: 10,
                batch: 15,
                ..JointTrainOptions::default()
            },
            paths: PathsConfig::default(),
            precision: Precision::F32,
            dataset,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cross-section checks; everything is validated before any work starts.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.validate()?;
        self.t60.net.validate()?;
        self.derev.net.validate()?;
        self.joint.validate()?;
        let bins = d.stft.n_bins();
        if self.t60.net.input_rows != 3 * bins {
            return Err(Error::Config(format!(
                "t60.net.input_rows = {} but the STFT gives {} feature rows",
                self.t60.net.input_rows,
                3 * bins
            )));
        }
        if self.derev.net.bins != bins {
            return Err(Error::Config(format!(
                "derev.net.bins = {} but the STFT gives {bins} bins",
                self.derev.net.bins
            )));
        }
        if self.derev.net.penultimate_dim != 0 {
            return Err(Error::Config(
                "derev.net.penultimate_dim is set during fine-tuning; leave it at 0".into(),
            ));
        }
        for &t in &self.t60.net.class_times {
            if !d.t60_grid.iter().any(|&g| (g - t).abs() < 1e-9) {
                return Err(Error::Config(format!(
                    "class time {t} s is not in the dataset grid {:?}",
                    d.t60_grid
                )));
            }
        }
        for &t in &d.derev_t60s {
            if !self.t60.net.class_times.iter().any(|&g| (g - t).abs() < 1e-9) {
                return Err(Error::Config(format!(
                    "dereverberation T60 {t} s is not a T60 class {:?}",
                    self.t60.net.class_times
                )));
            }
        }
        for (name, a, b) in [
            ("t60.train", self.t60.train.alpha, self.t60.train.beta),
            ("joint", self.joint.alpha, self.joint.gamma),
        ] {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!("{name}: loss weights must lie in [0, 1]")));
            }
        }
        if self.t60.train.batch < 2 || self.joint.batch < 2 {
            return Err(Error::Config("T60 and joint batches need at least 2 examples".into()));
        }
        if self.derev.train.batch == 0 {
            return Err(Error::Config("derev.train.batch must be positive".into()));
        }
        Ok(())
    }
}
