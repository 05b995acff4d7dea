//! Supervised corpora of (reverberant, direct-early, late) triples.

mod speech;

pub use speech::{synth_speechlike, SPEECHLIKE_PEAK};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::room::{
    calibrate_reflection, decompose_rir, simulate_rir_with, Reflection, Rir, RirOptions, RirParts, RoomSpec,
    TEST_ROOMS, TRAIN_ROOMS,
};
use crate::signal::{convolve_slices, extract_t60_features, stft, AudioSignal, FeatureMap, NormStats, StftConfig, STD_FLOOR};
use crate::wav::{read_wav, write_wav, WavEncoding};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "dataset.json";
pub const NORM_FILE: &str = "norm_stats.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Relative tolerance of the direct-early + late = reverberant identity.
pub const ADDITIVITY_TOL: f64 = 1e-6;

/// SplitMix64 finaliser used to derive independent stream seeds.
pub fn sub_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    /// RIRs per (room, T60) cell.
    pub rirs_per_cell: usize,
    /// Clean signals convolved with each RIR.
    pub cleans_per_rir: usize,
    /// Distinct clean signals available to this split.
    pub clean_pool: usize,
}

impl SplitCounts {
    pub fn examples_per_room_t60(&self) -> usize {
        self.rirs_per_cell * self.cleans_per_rir
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub fs: u32,
    pub stft: StftConfig,
    /// Rooms used for the train and val splits.
    pub train_rooms: Vec<[f64; 3]>,
    /// Rooms used for the test split.
    pub test_rooms: Vec<[f64; 3]>,
    /// Nominal T60 values; also the class times of the T60 estimator.
    pub t60_grid: Vec<f64>,
    /// Subset of the grid used for dereverberation and joint training.
    pub derev_t60s: Vec<f64>,
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
    /// Clean signals are trimmed or zero-padded to this length.
    pub duration_s: f64,
    pub source_distance_m: f64,
    pub wall_clearance_m: f64,
    /// Directory of mono WAV files; synthetic speech-like signals otherwise.
    pub clean_dir: Option<PathBuf>,
    /// Use the same clean signal for matching RIR slots of different rooms.
    pub reuse_cleans_across_rooms: bool,
}

impl DatasetConfig {
    /// Desk-scale corpus: one room per side, three T60 values.
    pub fn desk() -> Self {
        Self {
            fs: 8000,
            stft: StftConfig::standard(),
            train_rooms: vec![TRAIN_ROOMS[0]],
            test_rooms: vec![TEST_ROOMS[0]],
            t60_grid: vec![0.3, 0.6, 0.9],
            derev_t60s: vec![0.3, 0.6, 0.9],
            train: SplitCounts {
                rirs_per_cell: 5,
                cleans_per_rir: 5,
                clean_pool: 25,
            },
            val: SplitCounts {
                rirs_per_cell: 1,
                cleans_per_rir: 2,
                clean_pool: 2,
            },
            test: SplitCounts {
                rirs_per_cell: 2,
                cleans_per_rir: 5,
                clean_pool: 10,
            },
            duration_s: 2.0,
            source_distance_m: 1.0,
            wall_clearance_m: 0.5,
            clean_dir: None,
            reuse_cleans_across_rooms: false,
        }
    }

    /// Full-scale protocol: 14 rooms, 13 classes, 6 s signals.
    pub fn full() -> Self {
        Self {
            train_rooms: TRAIN_ROOMS.to_vec(),
            test_rooms: TEST_ROOMS.to_vec(),
            t60_grid: (0..13).map(|i| ((3 + i) as f64) / 10.0).collect(),
            derev_t60s: vec![0.3, 0.6, 0.9],
            train: SplitCounts {
                rirs_per_cell: 50,
                cleans_per_rir: 10,
                clean_pool: 5000,
            },
            val: SplitCounts {
                rirs_per_cell: 5,
                cleans_per_rir: 10,
                clean_pool: 500,
            },
            test: SplitCounts {
                rirs_per_cell: 500,
                cleans_per_rir: 1,
                clean_pool: 500,
            },
            duration_s: 6.0,
            ..Self::desk()
        }
    }

    pub fn counts(&self, split: Split) -> &SplitCounts {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn rooms(&self, split: Split) -> &[[f64; 3]] {
        match split {
            Split::Train | Split::Val => &self.train_rooms,
            Split::Test => &self.test_rooms,
        }
    }

    pub fn clip_len(&self) -> usize {
        (self.duration_s * self.fs as f64).round() as usize
    }

    /// Examples per (split, T60) cell.
    pub fn cell_count(&self, split: Split) -> usize {
        self.rooms(split).len() * self.counts(split).examples_per_room_t60()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fs == 0 {
            return bad("fs must be positive".into());
        }
        self.stft.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.t60_grid.is_empty() {
            return bad("t60_grid is empty".into());
        }
        if self.t60_grid.windows(2).any(|w| !(w[1] > w[0])) || !(self.t60_grid[0] > 0.0) {
            return bad(format!("t60_grid must be positive and strictly increasing: {:?}", self.t60_grid));
        }
        for t in &self.derev_t60s {
            if class_index(*t, &self.t60_grid).is_err() {
                return bad(format!("derev T60 {t} is not on the grid {:?}", self.t60_grid));
            }
        }
        if self.train_rooms.is_empty() {
            return bad("no training rooms".into());
        }
        for d in self.train_rooms.iter().chain(&self.test_rooms) {
            if d.iter().any(|v| *v <= 2.0 * self.wall_clearance_m) {
                return bad(format!("room {d:?} is too small for the wall clearance"));
            }
        }
        for s in Split::ALL {
            let c = self.counts(s);
            if c.rirs_per_cell > 0 && (c.cleans_per_rir == 0 || c.clean_pool == 0) {
                return bad(format!("{} split needs cleans_per_rir and clean_pool > 0", s.as_str()));
            }
        }
        if self.train.rirs_per_cell == 0 {
            return bad("train split is empty".into());
        }
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive".into());
        }
        if self.clip_len() < self.stft.window_len {
            return bad("duration_s is shorter than one STFT window".into());
        }
        if !(self.source_distance_m > 0.0) || self.wall_clearance_m < 0.0 {
            return bad("invalid source distance or wall clearance".into());
        }
        Ok(())
    }
}

/// Index of the grid entry equal to `t60` (within 1e-6 s).
pub fn class_index(t60: f64, grid: &[f64]) -> Result<usize> {
    grid.iter()
        .position(|g| (g - t60).abs() < 1e-6)
        .ok_or_else(|| invalid(format!("T60 {t60} is not on the grid {grid:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub reverberant: AudioSignal<T>,
    pub direct_early: AudioSignal<T>,
    pub late: AudioSignal<T>,
    pub t60_label: f64,
    pub t60_class: usize,
    pub room_id: String,
    pub rir_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub reverberant: AudioSignal<f64>,
    pub direct_early: AudioSignal<f64>,
    pub late: AudioSignal<f64>,
    pub warnings: Vec<String>,
}

/// Convolves a clean signal with the full RIR and its two parts; every
/// output is truncated to `target_len` seconds.
pub fn synthesize_example(clean: &AudioSignal<f64>, parts: &RirParts, target_len: f64) -> Result<SynthOutput> {
    if clean.sample_rate() != parts.sample_rate {
        return Err(invalid(format!(
            "clean signal at {} Hz, RIR at {} Hz",
            clean.sample_rate(),
            parts.sample_rate
        )));
    }
    if !(target_len > 0.0) {
        return Err(invalid("target length must be positive"));
    }
    let fs = clean.sample_rate();
    let n = (target_len * fs as f64).round() as usize;
    let clean = clean.clone().fit_to_len(n);
    let mut warnings = Vec::new();
    if clean.energy() == 0.0 {
        warnings.push("silent clean signal".to_string());
    }
    let conv = |h: &[f64]| -> Result<AudioSignal<f64>> {
        let mut y = convolve_slices(clean.samples(), h)?;
        y.truncate(n);
        y.resize(n, 0.0);
        AudioSignal::new(y, fs)
    };
    Ok(SynthOutput {
        reverberant: conv(&parts.full())?,
        direct_early: conv(&parts.direct_early())?,
        late: conv(&parts.late)?,
        warnings,
    })
}

/// `max |rev - (de + late)| / max |rev|`.
pub fn additivity_error(reverberant: &[f64], direct_early: &[f64], late: &[f64]) -> f64 {
    let scale = reverberant.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    reverberant
        .iter()
        .zip(direct_early.iter().zip(late))
        .map(|(r, (d, l))| (r - (d + l)).abs())
        .fold(0.0, f64::max)
        / scale
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExamplePaths {
    pub reverb: String,
    pub direct_early: String,
    pub late: String,
}

/// One line of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub room_id: String,
    pub rir_id: String,
    pub t60: f64,
    pub t60_class: usize,
    pub clean_id: String,
    pub paths: ExamplePaths,
    pub frames: usize,
    pub source_pos: [f64; 3],
    pub mic_pos: [f64; 3],
    pub reflection: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    pub seed: u64,
    pub stft: StftConfig,
    pub t60_grid: Vec<f64>,
    pub derev_t60s: Vec<f64>,
    pub norm_stats_path: String,
    pub manifest_path: String,
    pub n_examples: usize,
    pub rir_len: usize,
    pub config: DatasetConfig,
    #[serde(default)]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub meta: DatasetMeta,
    pub examples: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.examples {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(meta: DatasetMeta, text: &str) -> Result<Self> {
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1))))
            .collect::<Result<Vec<ManifestRecord>>>()?;
        Ok(Self { meta, examples })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(&self.meta.manifest_path), self.to_jsonl()?)?;
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    /// Loads `dataset.json` and the manifest it names from `dir`.
    pub fn read(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
        if meta.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", meta.version)));
        }
        let text = fs::read_to_string(dir.join(&meta.manifest_path))?;
        Self::from_jsonl(meta, &text)
    }

    pub fn norm_stats(&self, dir: &Path) -> Result<NormStats> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(&self.meta.norm_stats_path))?)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.examples.iter().filter(move |r| r.split == split)
    }

    /// Checks that every referenced file exists and parses.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let fs_rate = self.meta.config.fs;
        self.examples.par_iter().try_for_each(|r| {
            for p in [&r.paths.reverb, &r.paths.direct_early, &r.paths.late] {
                read_wav::<f32>(dir.join(p), Some(fs_rate))
                    .map_err(|e| Error::Contract(format!("{}: {p}: {e}", r.id)))?;
            }
            Ok(())
        })
    }

    pub fn load_example(&self, dir: &Path, r: &ManifestRecord) -> Result<TrainingExample<f64>> {
        let rate = Some(self.meta.config.fs);
        Ok(TrainingExample {
            reverberant: read_wav(dir.join(&r.paths.reverb), rate)?,
            direct_early: read_wav(dir.join(&r.paths.direct_early), rate)?,
            late: read_wav(dir.join(&r.paths.late), rate)?,
            t60_label: r.t60,
            t60_class: r.t60_class,
            room_id: r.room_id.clone(),
            rir_id: r.rir_id.clone(),
        })
    }
}

#[derive(Debug, Clone)]
struct RirJob {
    split: Split,
    room: usize,
    t60_idx: usize,
    index: usize,
}

impl RirJob {
    fn room_id(&self) -> String {
        format!("{}-room{:02}", self.split.as_str(), self.room)
    }

    fn rir_id(&self, t60: f64) -> String {
        format!("{}-t{:03}-r{:04}", self.room_id(), (t60 * 100.0).round() as u32, self.index)
    }
}

struct Clip {
    id: String,
    signal: Option<AudioSignal<f64>>,
    error: Option<String>,
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Per-row first and second moments of one feature map.
struct RowMoments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

fn row_moments(map: &FeatureMap<f64>) -> RowMoments {
    let n = map.frames();
    let mut mean = Vec::with_capacity(map.rows());
    let mut m2 = Vec::with_capacity(map.rows());
    for r in 0..map.rows() {
        let row = map.row(r);
        let mu = row.iter().sum::<f64>() / n as f64;
        mean.push(mu);
        m2.push(row.iter().map(|v| (v - mu) * (v - mu)).sum());
    }
    RowMoments { count: n, mean, m2 }
}

fn merge_moments(parts: &[RowMoments]) -> Result<NormStats> {
    let first = parts.first().ok_or_else(|| invalid("no training features to normalize"))?;
    let rows = first.mean.len();
    let total: usize = parts.iter().map(|p| p.count).sum();
    let mut mean = vec![0.0; rows];
    let mut std = vec![0.0; rows];
    for r in 0..rows {
        let mu = parts.iter().map(|p| p.mean[r] * p.count as f64).sum::<f64>() / total as f64;
        let ss: f64 = parts
            .iter()
            .map(|p| p.m2[r] + p.count as f64 * (p.mean[r] - mu).powi(2))
            .sum();
        mean[r] = mu;
        std[r] = (ss / total as f64).sqrt().max(STD_FLOOR);
    }
    Ok(NormStats { mean, std })
}

/// Simulates RIRs, mixes clean signals and writes WAVs, the manifest and
/// training-split normalization statistics under `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let fs_rate = cfg.fs;

    let mut jobs = Vec::new();
    for split in Split::ALL {
        let c = cfg.counts(split);
        for room in 0..cfg.rooms(split).len() {
            for t60_idx in 0..cfg.t60_grid.len() {
                for index in 0..c.rirs_per_cell {
                    jobs.push(RirJob {
                        split,
                        room,
                        t60_idx,
                        index,
                    });
                }
            }
        }
    }

    // One reflection coefficient per (room, T60); it depends on the
    // placement only through the fixed source distance.
    let mut cells: Vec<([f64; 3], usize)> = Vec::new();
    for j in &jobs {
        let key = (cfg.rooms(j.split)[j.room], j.t60_idx);
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    let betas: Vec<f64> = cells
        .par_iter()
        .map(|(dims, ti)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &[7]));
            let room = RoomSpec::random_placement(*dims, cfg.source_distance_m, cfg.wall_clearance_m, &mut rng)?;
            calibrate_reflection(&room, cfg.t60_grid[*ti], fs_rate)
        })
        .collect::<Result<_>>()?;
    let beta_of = |dims: [f64; 3], ti: usize| betas[cells.iter().position(|c| *c == (dims, ti)).unwrap()];

    log::info!("simulating {} RIRs", jobs.len());
    let rirs: Vec<(RoomSpec, Rir, f64)> = jobs
        .par_iter()
        .map(|j| {
            let dims = cfg.rooms(j.split)[j.room];
            let tags = [1, j.split.tag(), j.room as u64, j.t60_idx as u64, j.index as u64];
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &tags));
            let room = RoomSpec::random_placement(dims, cfg.source_distance_m, cfg.wall_clearance_m, &mut rng)?;
            let beta = beta_of(dims, j.t60_idx);
            let opts = RirOptions {
                reflection: Reflection::Fixed(beta),
                ..RirOptions::default()
            };
            let rir = simulate_rir_with(&room, cfg.t60_grid[j.t60_idx], fs_rate, &opts)?;
            Ok((room, rir, beta))
        })
        .collect::<Result<_>>()?;
    let rir_len = rirs.iter().map(|(_, r, _)| r.len()).max().unwrap_or(0);

    // Clean pools, partitioned train | val | test.
    let files = match &cfg.clean_dir {
        Some(d) => {
            let f = list_wavs(d)?;
            let need: usize = Split::ALL.iter().map(|s| cfg.counts(*s).clean_pool).sum();
            if f.len() < need {
                return Err(Error::Config(format!(
                    "{} holds {} WAV files, the clean pools need {need}",
                    d.display(),
                    f.len()
                )));
            }
            Some(f)
        }
        None => None,
    };
    let pool_offset = |s: Split| -> usize {
        Split::ALL
            .iter()
            .take_while(|x| **x != s)
            .map(|x| cfg.counts(*x).clean_pool)
            .sum()
    };
    let clip_len = cfg.clip_len();
    let load_clip = |split: Split, k: usize| -> Clip {
        match &files {
            None => {
                let id = format!("synth-{}-{k:05}", split.as_str());
                let s = synth_speechlike(cfg.duration_s, fs_rate, sub_seed(seed, &[2, split.tag(), k as u64]));
                match s {
                    Ok(s) => Clip {
                        id,
                        signal: Some(s.fit_to_len(clip_len)),
                        error: None,
                    },
                    Err(e) => Clip {
                        id,
                        signal: None,
                        error: Some(e.to_string()),
                    },
                }
            }
            Some(f) => {
                let path = &f[pool_offset(split) + k];
                let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                match read_wav::<f64>(path, Some(fs_rate)) {
                    Ok(s) => Clip {
                        id,
                        signal: Some(s.fit_to_len(clip_len)),
                        error: None,
                    },
                    Err(e) => Clip {
                        id,
                        signal: None,
                        error: Some(format!("{}: {e}", path.display())),
                    },
                }
            }
        }
    };

    struct Item {
        job: usize,
        clean: usize,
    }
    let mut items = Vec::new();
    for (ji, j) in jobs.iter().enumerate() {
        let c = cfg.counts(j.split);
        for ci in 0..c.cleans_per_rir {
            let slot = if cfg.reuse_cleans_across_rooms {
                j.index * c.cleans_per_rir + ci
            } else {
                (j.room * c.rirs_per_cell + j.index) * c.cleans_per_rir + ci
            };
            items.push(Item {
                job: ji,
                clean: slot % c.clean_pool,
            });
        }
    }

    fs::create_dir_all(out_dir.join("wav"))?;
    log::info!("synthesizing {} examples", items.len());
    type Done = std::result::Result<(ManifestRecord, Option<RowMoments>), String>;
    let done: Vec<Done> = items
        .par_iter()
        .enumerate()
        .map(|(idx, it)| -> Done {
            let j = &jobs[it.job];
            let (room, rir, beta) = &rirs[it.job];
            let t60 = cfg.t60_grid[j.t60_idx];
            let id = format!("ex{idx:06}");
            let clip = load_clip(j.split, it.clean);
            let clean = match (clip.signal, clip.error) {
                (Some(s), _) => s,
                (None, e) => return Err(format!("{id}: clean {}: {}", clip.id, e.unwrap_or_default())),
            };
            let run = || -> Result<(ManifestRecord, Option<RowMoments>)> {
                let parts = decompose_rir(&rir.zero_padded(rir_len))?;
                let out = synthesize_example(&clean, &parts, cfg.duration_s)?;
                let rel = |name: &str| format!("wav/{id}_{name}.wav");
                let paths = ExamplePaths {
                    reverb: rel("reverb"),
                    direct_early: rel("direct_early"),
                    late: rel("late"),
                };
                write_wav(out_dir.join(&paths.reverb), &out.reverberant, WavEncoding::Float32)?;
                write_wav(out_dir.join(&paths.direct_early), &out.direct_early, WavEncoding::Float32)?;
                write_wav(out_dir.join(&paths.late), &out.late, WavEncoding::Float32)?;
                let moments = if j.split == Split::Train {
                    // Statistics see exactly what training will read back.
                    let stored = out.reverberant.cast::<f32>().cast::<f64>();
                    let spec = stft(&stored, &cfg.stft)?;
                    Some(row_moments(&extract_t60_features(&spec, None)?))
                } else {
                    None
                };
                let record = ManifestRecord {
                    id: id.clone(),
                    split: j.split,
                    room_id: j.room_id(),
                    rir_id: j.rir_id(t60),
                    t60,
                    t60_class: j.t60_idx,
                    clean_id: clip.id.clone(),
                    paths,
                    frames: cfg.stft.n_frames(out.reverberant.len()),
                    source_pos: room.source_pos,
                    mic_pos: room.mic_pos,
                    reflection: *beta,
                    warnings: out.warnings,
                };
                Ok((record, moments))
            };
            run().map_err(|e| format!("{id}: {e}"))
        })
        .collect();

    let mut examples = Vec::new();
    let mut moments = Vec::new();
    let mut errors = Vec::new();
    for d in done {
        match d {
            Ok((r, m)) => {
                examples.push(r);
                moments.extend(m);
            }
            Err(e) => {
                log::warn!("{e}");
                errors.push(e);
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::InvalidState(format!(
            "dataset is empty ({} item errors)",
            errors.len()
        )));
    }
    let norm = merge_moments(&moments)?;
    fs::write(out_dir.join(NORM_FILE), serde_json::to_string(&norm)? + "\n")?;

    let manifest = DatasetManifest {
        meta: DatasetMeta {
            version: MANIFEST_VERSION,
            seed,
            stft: cfg.stft,
            t60_grid: cfg.t60_grid.clone(),
            derev_t60s: cfg.derev_t60s.clone(),
            norm_stats_path: NORM_FILE.into(),
            manifest_path: MANIFEST_FILE.into(),
            n_examples: examples.len(),
            rir_len,
            config: cfg.clone(),
            errors,
        },
        examples,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Example counts per (split, T60).
pub fn cell_counts(m: &DatasetManifest) -> BTreeMap<(Split, u64), usize> {
    let mut out = BTreeMap::new();
    for r in &m.examples {
        *out.entry((r.split, (r.t60 * 1000.0).round() as u64)).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::room::simulate_rir;

    fn tiny_cfg() -> DatasetConfig {
        DatasetConfig {
            train_rooms: vec![[6.0, 5.0, 3.0]],
            test_rooms: vec![[5.0, 4.0, 3.0]],
            t60_grid: vec![0.3, 0.6],
            derev_t60s: vec![0.3],
            train: SplitCounts {
                rirs_per_cell: 2,
                cleans_per_rir: 2,
                clean_pool: 4,
            },
            val: SplitCounts {
                rirs_per_cell: 1,
                cleans_per_rir: 1,
                clean_pool: 1,
            },
            test: SplitCounts {
                rirs_per_cell: 1,
                cleans_per_rir: 1,
                clean_pool: 1,
            },
            duration_s: 0.5,
            ..DatasetConfig::desk()
        }
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(1, &[0, 1]), sub_seed(1, &[1, 0]));
        assert_ne!(sub_seed(1, &[0]), sub_seed(2, &[0]));
        assert_eq!(sub_seed(5, &[3, 4]), sub_seed(5, &[3, 4]));
    }

    #[test]
    fn config_shapes() {
        let full = DatasetConfig::full();
        full.validate().unwrap();
        assert_eq!(full.t60_grid.len(), 13);
        assert_eq!(full.train_rooms.len(), 10);
        assert_eq!(full.test_rooms.len(), 4);
        assert_eq!(full.cell_count(Split::Train), 5000);
        assert_eq!(full.cell_count(Split::Val), 500);
        assert_eq!(full.cell_count(Split::Test), 2000);
        let desk = DatasetConfig::desk();
        desk.validate().unwrap();
        assert_eq!(desk.cell_count(Split::Train) * desk.t60_grid.len(), 75);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let mut v = serde_json::to_value(DatasetConfig::desk()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<DatasetConfig>(v).is_err());
        let mut c = DatasetConfig::desk();
        c.derev_t60s = vec![0.45];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = DatasetConfig::desk();
        c.t60_grid = vec![0.6, 0.3];
        assert!(c.validate().is_err());
    }

    fn parts_for(t60: f64) -> RirParts {
        let room = RoomSpec::new([6.0, 5.0, 3.0], [2.0, 2.0, 1.5], [3.0, 2.0, 1.5]).unwrap();
        decompose_rir(&simulate_rir(&room, t60, 8000, None).unwrap()).unwrap()
    }

    #[test]
    fn unit_impulse_reproduces_rir() {
        let parts = parts_for(0.3);
        let mut x = vec![0.0; 4000];
        x[0] = 1.0;
        let out = synthesize_example(&AudioSignal::new(x, 8000).unwrap(), &parts, 0.5).unwrap();
        let full = parts.full();
        let n = full.len().min(4000);
        for i in 0..n {
            assert!((out.reverberant.samples()[i] - full[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_late_part() {
        let mut parts = parts_for(0.3);
        parts.late.iter_mut().for_each(|v| *v = 0.0);
        let clean = synth_speechlike(0.5, 8000, 1).unwrap();
        let out = synthesize_example(&clean, &parts, 0.5).unwrap();
        assert!(out.late.samples().iter().all(|v| *v == 0.0));
        for (a, b) in out.reverberant.samples().iter().zip(out.direct_early.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn additivity_and_truncation() {
        let parts = parts_for(0.6);
        let clean = synth_speechlike(1.0, 8000, 2).unwrap();
        let out = synthesize_example(&clean, &parts, 1.0).unwrap();
        assert_eq!(out.reverberant.len(), 8000);
        assert_eq!(out.late.len(), 8000);
        let e = additivity_error(out.reverberant.samples(), out.direct_early.samples(), out.late.samples());
        assert!(e < ADDITIVITY_TOL, "{e}");
    }

    #[test]
    fn silent_clean_is_flagged() {
        let out = synthesize_example(&AudioSignal::zeros(4000, 8000), &parts_for(0.3), 0.5).unwrap();
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let clean = AudioSignal::<f64>::zeros(100, 16000);
        assert!(synthesize_example(&clean, &parts_for(0.3), 0.5).is_err());
    }

    #[test]
    fn build_counts_determinism_and_round_trip() {
        let cfg = tiny_cfg();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = build_dataset(&cfg, 7, a.path()).unwrap();
        build_dataset(&cfg, 7, b.path()).unwrap();
        let read = |d: &Path| fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        assert_eq!(
            fs::read(a.path().join(NORM_FILE)).unwrap(),
            fs::read(b.path().join(NORM_FILE)).unwrap()
        );

        let counts = cell_counts(&m);
        assert_eq!(counts[&(Split::Train, 300)], 4);
        assert_eq!(counts[&(Split::Train, 600)], 4);
        assert_eq!(counts[&(Split::Val, 600)], 1);
        assert_eq!(counts[&(Split::Test, 300)], 1);
        assert_eq!(m.examples.len(), 12);

        let back = DatasetManifest::read(a.path()).unwrap();
        assert_eq!(back, m);
        let c = tempfile::tempdir().unwrap();
        back.write(c.path()).unwrap();
        assert_eq!(read(a.path()), read(c.path()));
        assert_eq!(
            fs::read(a.path().join(META_FILE)).unwrap(),
            fs::read(c.path().join(META_FILE)).unwrap()
        );
        m.verify(a.path()).unwrap();

        let stats = m.norm_stats(a.path()).unwrap();
        assert_eq!(stats.len(), 3 * cfg.stft.n_bins());

        let ex = m.load_example(a.path(), &m.examples[0]).unwrap();
        let e = additivity_error(ex.reverberant.samples(), ex.direct_early.samples(), ex.late.samples());
        // float32 storage
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn clean_dir_with_too_few_files_is_a_config_error() {
        let d = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.clean_dir = Some(d.path().to_path_buf());
        let out = tempfile::tempdir().unwrap();
        assert!(matches!(build_dataset(&cfg, 1, out.path()), Err(Error::Config(_))));
    }

    #[test]
    fn unreadable_cleans_are_reported_per_item() {
        let d = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        for i in 0..6 {
            let p = d.path().join(format!("c{i}.wav"));
            if i == 1 {
                fs::write(&p, b"not a wav").unwrap();
            } else {
                write_wav(&p, &synth_speechlike(0.5, 8000, i).unwrap(), WavEncoding::Pcm16).unwrap();
            }
        }
        cfg.clean_dir = Some(d.path().to_path_buf());
        let out = tempfile::tempdir().unwrap();
        let m = build_dataset(&cfg, 1, out.path()).unwrap();
        assert!(!m.meta.errors.is_empty());
        assert!(m.meta.errors.iter().all(|e| e.contains("c1.wav")));
        assert_eq!(m.examples.len() + m.meta.errors.len(), 12);
    }
}
