//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use revtk::checkpoint::{Checkpoint, ModelKind};
use revtk::config::{Precision, TrainConfig};
use revtk::dataset::{build_dataset, DatasetManifest, Split};
use revtk::derev::{enhance, DerevNet, JointNet};
use revtk::metrics::MetricReport;
use revtk::room::{
    calibrate_reflection, decompose_rir, default_max_order, measure_t60_schroeder, sabine_absorption,
    simulate_rir_with, Reflection, Rir, RirOptions, RirRecord, RoomSpec,
};
use revtk::signal::AudioSignal;
use revtk::t60net::T60Net;
use revtk::train::{
    derev_checkpoint, evaluate_joint, evaluate_oracle, evaluate_t60, fit_derev, fit_joint, fit_t60, history_csv,
    joint_from_checkpoints, load_derev_samples, load_examples, load_t60_samples, optimizer_record, oracle_enhance,
    penultimate_csv, predict_t60, t60_checkpoint,
};
use revtk::wav::{read_wav, write_wav, WavEncoding};
use revtk::Scalar;

use crate::record::{usage, Ctx};
use crate::{
    Command, ConfigArgs, DatasetCmd, EnhanceArgs, EvaluateArgs, ExportPairsArgs, ExportPenultimateArgs, FinetuneCmd,
    InputArgs, JointArgs, RirCmd, SimulateArgs, TrainCmd, TrainT60Args,
};

fn triple(s: &str, sep: char) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(sep)
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected three values, got {}", v.len()))
}

pub fn parse_dims(s: &str) -> std::result::Result<[f64; 3], String> {
    triple(&s.to_ascii_lowercase(), 'x')
}

pub fn parse_point(s: &str) -> std::result::Result<[f64; 3], String> {
    triple(s, ',')
}

pub fn dispatch(cmd: &Command, ctx: &mut Ctx) -> Result<()> {
    match cmd {
        Command::Rir(RirCmd::Simulate(a)) => rir_simulate(a, ctx),
        Command::Rir(RirCmd::Decompose(a)) => rir_decompose(a, ctx),
        Command::Rir(RirCmd::Measure(a)) => rir_measure(a, ctx),
        Command::Dataset(DatasetCmd::Build(a)) => dataset_build(&a.config, ctx),
        Command::Train(TrainCmd::T60(a)) => train_t60(a, ctx),
        Command::Train(TrainCmd::Derev(a)) => train_derev(&a.config, ctx),
        Command::Finetune(FinetuneCmd::Joint(a)) => finetune_joint(a, ctx),
        Command::Enhance(a) => enhance_file(a, ctx),
        Command::Evaluate(a) => evaluate(a, ctx),
        Command::ExportEvalPairs(a) => export_pairs(a, ctx),
        Command::ExportPenultimate(a) => export_penultimate(a, ctx),
        Command::Selftest => selftest(ctx),
        Command::Config(a) => write_config(a, ctx),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize, ctx: &mut Ctx) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))?;
    ctx.output(path);
    Ok(())
}

fn write_text(path: &Path, text: &str, ctx: &mut Ctx) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    ctx.output(path);
    Ok(())
}

fn write_signal(path: &Path, x: &AudioSignal<f64>, ctx: &mut Ctx) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_wav(path, x, WavEncoding::Float32)?;
    ctx.output(path);
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "rir".into(), |s| s.to_string_lossy().into_owned())
}

// ---- rir ----

fn rir_simulate(a: &SimulateArgs, ctx: &mut Ctx) -> Result<()> {
    let room = match (a.source, a.mic) {
        (Some(s), Some(m)) => RoomSpec::new(a.dims, s, m)?,
        (None, None) => {
            let seed = ctx.seed.unwrap_or(0);
            ctx.seed_used("placement", seed);
            RoomSpec::random_placement(a.dims, a.distance, a.clearance, &mut ChaCha8Rng::seed_from_u64(seed))?
        }
        _ => return Err(usage("--source and --mic must be given together")),
    };
    let beta = if a.sabine {
        (1.0 - sabine_absorption(&room, a.t60)?).sqrt()
    } else {
        calibrate_reflection(&room, a.t60, a.fs)?
    };
    let max_order = a.max_order.unwrap_or_else(|| default_max_order(beta));
    let opts = RirOptions {
        max_order: Some(max_order),
        reflection: Reflection::Fixed(beta),
        ..RirOptions::default()
    };
    let h = simulate_rir_with(&room, a.t60, a.fs, &opts)?;
    let measured = measure_t60_schroeder(&h).ok();
    let path = ctx.out_file("rir.wav");
    write_signal(&path, &AudioSignal::new(h.taps.clone(), a.fs)?, ctx)?;
    let rec = RirRecord {
        dims: room.dims,
        source_pos: room.source_pos,
        mic_pos: room.mic_pos,
        nominal_t60: a.t60,
        measured_t60: measured,
        fs: a.fs,
        max_order,
        reflection: beta,
    };
    write_json(&path.with_extension("json"), &rec, ctx)?;
    ctx.detail("rir", &rec);
    log::info!("simulated {} taps, reflection {beta:.4}, order {max_order}", h.len());
    Ok(())
}

/// Reads a RIR WAV, taking the nominal T60 from a sidecar JSON if present.
fn read_rir(path: &Path) -> Result<Rir> {
    let x = read_wav::<f64>(path, None)?;
    let nominal = std::fs::read_to_string(path.with_extension("json"))
        .ok()
        .and_then(|s| serde_json::from_str::<RirRecord>(&s).ok())
        .map_or(f64::NAN, |r| r.nominal_t60);
    let fs = x.sample_rate();
    Ok(Rir::new(x.into_samples(), fs, nominal)?)
}

fn rir_decompose(a: &InputArgs, ctx: &mut Ctx) -> Result<()> {
    let h = read_rir(&a.input)?;
    let parts = decompose_rir(&h)?;
    let dir = ctx.out_dir();
    let name = stem(&a.input);
    for (suffix, taps) in [
        ("direct", parts.direct.clone()),
        ("early", parts.early.clone()),
        ("late", parts.late.clone()),
        ("direct_early", parts.direct_early()),
    ] {
        write_signal(&dir.join(format!("{name}_{suffix}.wav")), &AudioSignal::new(taps, h.sample_rate)?, ctx)?;
    }
    let info = json!({
        "input": a.input,
        "sample_rate": h.sample_rate,
        "len": parts.len(),
        "direct_end": parts.boundaries.0,
        "early_end": parts.boundaries.1,
        "peak": h.peak_index(),
    });
    write_json(&dir.join(format!("{name}_parts.json")), &info, ctx)
}

fn rir_measure(a: &InputArgs, ctx: &mut Ctx) -> Result<()> {
    let h = read_rir(&a.input)?;
    let t60 = measure_t60_schroeder(&h)?;
    log::info!("{}: T60 = {t60:.3} s", a.input.display());
    let info = json!({
        "input": a.input,
        "sample_rate": h.sample_rate,
        "measured_t60": t60,
        "nominal_t60": h.nominal_t60.is_finite().then_some(h.nominal_t60),
    });
    ctx.detail("measured_t60", t60);
    write_json(&ctx.out_dir().join(format!("{}_t60.json", stem(&a.input))), &info, ctx)
}

// ---- configs and data ----

fn load_config(path: &Path, ctx: &mut Ctx) -> Result<TrainConfig> {
    let cfg = TrainConfig::load(path)?;
    ctx.config = Some(serde_json::to_value(&cfg)?);
    Ok(cfg)
}

fn dataset_dir(cfg: &TrainConfig, ctx: &Ctx) -> PathBuf {
    cfg.paths.resolve(&ctx.out, &cfg.paths.dataset_dir)
}

fn read_manifest(cfg: &TrainConfig, ctx: &Ctx) -> Result<(DatasetManifest, PathBuf)> {
    let dir = dataset_dir(cfg, ctx);
    let m = DatasetManifest::read(&dir).with_context(|| format!("reading dataset in {}", dir.display()))?;
    if m.meta.stft != cfg.dataset.stft {
        bail!(usage(format!(
            "dataset in {} was built with a different STFT config",
            dir.display()
        )));
    }
    Ok((m, dir))
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| usage(format!("unknown split {s:?}; expected train, val or test")))
}

fn dataset_build(config: &Path, ctx: &mut Ctx) -> Result<()> {
    let cfg = load_config(config, ctx)?;
    let seed = ctx.seed.unwrap_or(0);
    ctx.seed_used("dataset", seed);
    let dir = dataset_dir(&cfg, ctx);
    let m = build_dataset(&cfg.dataset, seed, &dir)?;
    ctx.partial = !m.meta.errors.is_empty();
    ctx.detail("n_examples", m.meta.n_examples);
    ctx.detail("errors", &m.meta.errors);
    ctx.output(&dir);
    log::info!("{} examples written to {}", m.meta.n_examples, dir.display());
    Ok(())
}

fn write_config(a: &ConfigArgs, ctx: &mut Ctx) -> Result<()> {
    let cfg = match a.preset.as_str() {
        "full" => TrainConfig::full(),
        "desk" => TrainConfig::desk(),
        p => return Err(usage(format!("unknown preset {p:?}; expected full or desk"))),
    };
    let path = ctx.out_file(&format!("{}.json", a.preset));
    write_text(&path, &(cfg.to_json()? + "\n"), ctx)
}

// ---- training ----

fn train_t60(a: &TrainT60Args, ctx: &mut Ctx) -> Result<()> {
    let mut cfg = load_config(&a.config, ctx)?;
    if !a.t60.is_empty() {
        let grid = &cfg.dataset.t60_grid;
        for &t in &a.t60 {
            if !grid.iter().any(|&g| (g - t).abs() < 1e-9) {
                return Err(usage(format!("--t60 {t} is not in the dataset T60 grid {grid:?}")));
            }
        }
        let mut times = a.t60.clone();
        times.sort_by(f64::total_cmp);
        times.dedup();
        cfg.t60.net.class_times = times;
        ctx.config = Some(serde_json::to_value(&cfg)?);
    }
    if let Some(s) = ctx.seed {
        cfg.t60.train.seed = s;
    }
    ctx.seed_used("t60", cfg.t60.train.seed);
    match cfg.precision {
        Precision::F32 => train_t60_as::<f32>(&cfg, !a.t60.is_empty(), ctx),
        Precision::F64 => train_t60_as::<f64>(&cfg, !a.t60.is_empty(), ctx),
    }
}

/// Keeps only manifest records whose T60 is a network class.
fn restrict(m: &mut DatasetManifest, times: &[f64]) {
    m.examples.retain(|r| times.iter().any(|&t| (t - r.t60).abs() < 1e-9));
}

fn train_t60_as<T: Scalar>(cfg: &TrainConfig, filter: bool, ctx: &mut Ctx) -> Result<()> {
    let (mut m, dir) = read_manifest(cfg, ctx)?;
    if filter {
        restrict(&mut m, &cfg.t60.net.class_times);
    }
    let norm = m.norm_stats(&dir)?;
    let train = load_t60_samples::<T>(&m, &dir, Split::Train, &norm, &cfg.t60.net)?;
    let val = load_t60_samples::<T>(&m, &dir, Split::Val, &norm, &cfg.t60.net)?;
    log::info!("T60 training on {} examples, validating on {}", train.len(), val.len());
    let opts = &cfg.t60.train;
    let mut net = T60Net::<T>::new(cfg.t60.net.clone(), opts.seed)?;
    let (history, opt) = fit_t60(&mut net, &train, &val, opts)?;
    let csv = history_csv(&history);
    let ck = t60_checkpoint(&net, opts.seed, history, &opt, &norm, &m.meta.stft, cfg.dataset.fs)?;
    let path = cfg.paths.resolve(&ctx.out, &cfg.paths.t60_checkpoint);
    save_checkpoint(&ck, &path, ctx)?;
    write_text(&path.with_extension("history.csv"), &csv, ctx)
}

fn save_checkpoint(ck: &Checkpoint, path: &Path, ctx: &mut Ctx) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    ck.save(path)?;
    ctx.output(path);
    log::info!("checkpoint written to {}", path.display());
    Ok(())
}

fn train_derev(config: &Path, ctx: &mut Ctx) -> Result<()> {
    let mut cfg = load_config(config, ctx)?;
    if let Some(s) = ctx.seed {
        cfg.derev.train.seed = s;
    }
    ctx.seed_used("derev", cfg.derev.train.seed);
    match cfg.precision {
        Precision::F32 => train_derev_as::<f32>(&cfg, ctx),
        Precision::F64 => train_derev_as::<f64>(&cfg, ctx),
    }
}

fn train_derev_as<T: Scalar>(cfg: &TrainConfig, ctx: &mut Ctx) -> Result<()> {
    let (m, dir) = read_manifest(cfg, ctx)?;
    let norm = m.norm_stats(&dir)?;
    let times = &cfg.t60.net.class_times;
    let train = load_derev_samples::<T>(&m, &dir, Split::Train, &norm, times)?;
    let val = load_derev_samples::<T>(&m, &dir, Split::Val, &norm, times)?;
    log::info!("dereverberation training on {} examples", train.len());
    let opts = &cfg.derev.train;
    let mut net = DerevNet::<T>::new(cfg.derev.net.clone(), opts.seed)?;
    let (history, opt) = fit_derev(&mut net, &train, &val, opts)?;
    let csv = history_csv(&history);
    let ck = derev_checkpoint(&net, opts.seed, history, &opt, &m.meta.stft, cfg.dataset.fs)?;
    let path = cfg.paths.resolve(&ctx.out, &cfg.paths.derev_checkpoint);
    save_checkpoint(&ck, &path, ctx)?;
    write_text(&path.with_extension("history.csv"), &csv, ctx)
}

fn finetune_joint(a: &JointArgs, ctx: &mut Ctx) -> Result<()> {
    let mut cfg = load_config(&a.config, ctx)?;
    if let Some(g) = a.gamma {
        cfg.joint.gamma = g;
    }
    if let Some(al) = a.alpha {
        cfg.joint.alpha = al;
    }
    cfg.joint.freeze_t60_trunk |= a.freeze_t60_trunk;
    if let Some(s) = ctx.seed {
        cfg.joint.seed = s;
    }
    cfg.validate()?;
    ctx.config = Some(serde_json::to_value(&cfg)?);
    ctx.seed_used("joint", cfg.joint.seed);
    match cfg.precision {
        Precision::F32 => finetune_as::<f32>(&cfg, ctx),
        Precision::F64 => finetune_as::<f64>(&cfg, ctx),
    }
}

fn finetune_as<T: Scalar>(cfg: &TrainConfig, ctx: &mut Ctx) -> Result<()> {
    let t60_ck = Checkpoint::load(&cfg.paths.resolve(&ctx.out, &cfg.paths.t60_checkpoint))?;
    let derev_ck = Checkpoint::load(&cfg.paths.resolve(&ctx.out, &cfg.paths.derev_checkpoint))?;
    let mut net = joint_from_checkpoints::<T>(&t60_ck, &derev_ck)?;
    let (m, dir) = read_manifest(cfg, ctx)?;
    let times = net.t60.cfg.class_times.clone();
    let train = load_derev_samples::<T>(&m, &dir, Split::Train, &net.norm, &times)?;
    let val = load_derev_samples::<T>(&m, &dir, Split::Val, &net.norm, &times)?;
    log::info!("joint fine-tuning on {} examples, gamma {}", train.len(), cfg.joint.gamma);
    let (history, opt_t, opt_d) = fit_joint(&mut net, &train, &val, &cfg.joint)?;
    let csv = history_csv(&history);
    let mut ck = net.checkpoint(cfg.joint.seed)?;
    ck.header.history = history;
    ck.header.optimizers = vec![optimizer_record("t60", &opt_t), optimizer_record("derev", &opt_d)];
    ck.header.extra.insert("joint".into(), serde_json::to_value(&cfg.joint)?);
    let path = cfg.paths.resolve(&ctx.out, &cfg.paths.joint_checkpoint);
    save_checkpoint(&ck, &path, ctx)?;
    write_text(&path.with_extension("history.csv"), &csv, ctx)
}

// ---- inference and evaluation ----

fn enhance_file(a: &EnhanceArgs, ctx: &mut Ctx) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    ck.expect_kind(ModelKind::Joint)?;
    let mut net = JointNet::<f64>::from_checkpoint(&ck)?;
    let x = read_wav::<f64>(&a.input, None)?;
    let out = enhance(&x, &mut net)?;
    let path = ctx.out_file(&format!("{}_enhanced.wav", stem(&a.input)));
    write_signal(&path, &out.signal, ctx)?;
    let info = json!({
        "input": a.input,
        "checkpoint": a.checkpoint,
        "t60_regression": out.t60.reg_value,
        "t60_classification": out.t60.creg_value,
        "class_probs": out.t60.class_probs,
    });
    log::info!("estimated T60 {:.2} s", out.t60.creg_value);
    write_json(&path.with_extension("json"), &info, ctx)
}

enum Model {
    T60(T60Net<f64>),
    Joint(JointNet<f64>),
}

fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    Ok(match ck.header.kind {
        ModelKind::T60 => Model::T60(T60Net::from_checkpoint(&ck)?),
        ModelKind::Joint => Model::Joint(JointNet::from_checkpoint(&ck)?),
        ModelKind::Derev => {
            return Err(usage(format!(
                "{} holds a dereverberation network alone; evaluate a joint checkpoint",
                path.display()
            )))
        }
    })
}

fn checkpoint_path(cfg: &TrainConfig, arg: &Option<PathBuf>, ctx: &Ctx) -> PathBuf {
    arg.clone()
        .unwrap_or_else(|| cfg.paths.resolve(&ctx.out, &cfg.paths.joint_checkpoint))
}

/// Normalization stats of a T60 checkpoint.
fn t60_norm(path: &Path) -> Result<revtk::signal::NormStats> {
    Checkpoint::load(path)?
        .header
        .norm_stats
        .ok_or_else(|| anyhow::anyhow!("{} has no normalization statistics", path.display()))
}

fn evaluate(a: &EvaluateArgs, ctx: &mut Ctx) -> Result<()> {
    let cfg = load_config(&a.config, ctx)?;
    let split = parse_split(&a.split)?;
    let (m, dir) = read_manifest(&cfg, ctx)?;
    let report = if a.oracle {
        let ex = load_examples(&m, &dir, split, Some(&m.meta.derev_t60s))?;
        evaluate_oracle(&ex, &m.meta.stft)?
    } else {
        let path = checkpoint_path(&cfg, &a.checkpoint, ctx);
        match load_model(&path)? {
            Model::Joint(net) => {
                let ex = load_examples(&m, &dir, split, Some(&m.meta.derev_t60s))?;
                evaluate_joint(&net, &ex)?
            }
            Model::T60(mut net) => {
                let mut m = m;
                restrict(&mut m, &net.cfg.class_times);
                let norm = t60_norm(&path)?;
                let samples = load_t60_samples::<f64>(&m, &dir, split, &norm, &net.cfg)?;
                evaluate_t60(&mut net, &samples, 16)?
            }
        }
    };
    save_report(&report, &ctx.out.join(&a.name), ctx)
}

fn save_report(r: &MetricReport, stem: &Path, ctx: &mut Ctx) -> Result<()> {
    if let Some(d) = stem.parent() {
        std::fs::create_dir_all(d)?;
    }
    r.save(stem)?;
    ctx.output(&stem.with_extension("json"));
    ctx.output(&stem.with_extension("csv"));
    ctx.detail("n_examples", r.records.len());
    Ok(())
}

fn export_pairs(a: &ExportPairsArgs, ctx: &mut Ctx) -> Result<()> {
    let cfg = load_config(&a.config, ctx)?;
    let split = parse_split(&a.split)?;
    let (m, dir) = read_manifest(&cfg, ctx)?;
    let mut net = if a.oracle {
        None
    } else {
        match load_model(&checkpoint_path(&cfg, &a.checkpoint, ctx))? {
            Model::Joint(n) => Some(n),
            Model::T60(_) => return Err(usage("export-eval-pairs needs a joint checkpoint or --oracle")),
        }
    };
    let ex = load_examples(&m, &dir, split, Some(&m.meta.derev_t60s))?;
    let out = ctx.out.join("pairs");
    let mut index = String::from("id,t60,reference,reverberant,enhanced\n");
    for (id, e) in &ex {
        let enhanced = match net.as_mut() {
            Some(n) => enhance(&e.reverberant, n)?.signal,
            None => oracle_enhance(e, &m.meta.stft)?,
        };
        let len = e.direct_early.len();
        let names = [format!("{id}_ref.wav"), format!("{id}_reverb.wav"), format!("{id}_enh.wav")];
        write_signal(&out.join(&names[0]), &e.direct_early, ctx)?;
        write_signal(&out.join(&names[1]), &e.reverberant.clone().fit_to_len(len), ctx)?;
        write_signal(&out.join(&names[2]), &enhanced.fit_to_len(len), ctx)?;
        index.push_str(&format!("{id},{},{},{},{}\n", e.t60_label, names[0], names[1], names[2]));
    }
    write_text(&out.join("index.csv"), &index, ctx)
}

fn export_penultimate(a: &ExportPenultimateArgs, ctx: &mut Ctx) -> Result<()> {
    let cfg = load_config(&a.config, ctx)?;
    let split = parse_split(&a.split)?;
    let (mut m, dir) = read_manifest(&cfg, ctx)?;
    let path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.resolve(&ctx.out, &cfg.paths.t60_checkpoint));
    let (mut net, norm) = match load_model(&path)? {
        Model::T60(n) => (n, t60_norm(&path)?),
        Model::Joint(j) => (j.t60, j.norm),
    };
    restrict(&mut m, &net.cfg.class_times);
    let samples = load_t60_samples::<f64>(&m, &dir, split, &norm, &net.cfg)?;
    let maps: Vec<_> = samples.iter().map(|s| &s.features).collect();
    let outs = predict_t60(&mut net, &maps, 16)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let t60: Vec<f64> = samples.iter().map(|s| s.t60).collect();
    write_text(
        &ctx.out.join(format!("penultimate_{}.csv", split.as_str())),
        &penultimate_csv(&ids, &t60, &outs)?,
        ctx,
    )
}

fn selftest(ctx: &mut Ctx) -> Result<()> {
    let checks = revtk::selftest::run_selftest();
    for c in &checks {
        let tag = if c.passed { "ok" } else { "FAILED" };
        log::info!("{tag:>6}  {}  {:.3e} (limit {:.1e}) {}", c.name, c.value, c.limit, c.detail);
    }
    write_json(&ctx.out.join("selftest.json"), &checks, ctx)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} selftest check(s) failed");
    }
    Ok(())
}
