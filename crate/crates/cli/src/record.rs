//! Run records and exit-code policy.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{Cli, Command, DatasetCmd, FinetuneCmd, RirCmd, TrainCmd};

/// Argument or configuration problem; exits with code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<revtk::Error>() {
            return match err {
                revtk::Error::Config(_) | revtk::Error::InvalidArgument(_) | revtk::Error::InfeasibleT60 { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Rir(RirCmd::Simulate(_)) => "rir-simulate",
        Command::Rir(RirCmd::Decompose(_)) => "rir-decompose",
        Command::Rir(RirCmd::Measure(_)) => "rir-measure",
        Command::Dataset(DatasetCmd::Build(_)) => "dataset-build",
        Command::Train(TrainCmd::T60(_)) => "train-t60",
        Command::Train(TrainCmd::Derev(_)) => "train-derev",
        Command::Finetune(FinetuneCmd::Joint(_)) => "finetune-joint",
        Command::Enhance(_) => "enhance",
        Command::Evaluate(_) => "evaluate",
        Command::ExportEvalPairs(_) => "export-eval-pairs",
        Command::ExportPenultimate(_) => "export-penultimate",
        Command::Selftest => "selftest",
        Command::Config(_) => "config",
    }
}

/// Whether `--out` names a file for this command.
fn file_output(c: &Command) -> bool {
    matches!(c, Command::Rir(RirCmd::Simulate(_)) | Command::Enhance(_) | Command::Config(_))
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'a str,
    seed: Option<u64>,
    workers: Option<usize>,
    config: &'a Option<Value>,
    seeds: &'a Map<String, Value>,
    outputs: &'a [String],
    status: &'a str,
    partial: bool,
    error: Option<String>,
    details: &'a Map<String, Value>,
}

/// Per-invocation state collected for the run record.
#[derive(Debug)]
pub struct Ctx {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    name: &'static str,
    file_out: bool,
    argv: Vec<String>,
    pub config: Option<Value>,
    pub seeds: Map<String, Value>,
    outputs: Vec<String>,
    pub partial: bool,
    pub details: Map<String, Value>,
}

impl Ctx {
    pub fn new(cli: &Cli, argv: Vec<String>) -> Self {
        Self {
            out: cli.out.clone(),
            seed: cli.seed,
            workers: cli.workers,
            name: command_name(&cli.command),
            file_out: file_output(&cli.command),
            argv,
            config: None,
            seeds: Map::new(),
            outputs: Vec::new(),
            partial: false,
            details: Map::new(),
        }
    }

    /// Directory that receives outputs and the run record.
    pub fn out_dir(&self) -> PathBuf {
        if self.file_out && self.out.extension().is_some() {
            match self.out.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            }
        } else {
            self.out.clone()
        }
    }

    /// Target file for single-file commands: `--out` itself when it has an
    /// extension, otherwise `name` inside it.
    pub fn out_file(&self, name: &str) -> PathBuf {
        if self.out.extension().is_some() {
            self.out.clone()
        } else {
            self.out.join(name)
        }
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    pub fn detail(&mut self, k: &str, v: impl Serialize) {
        if let Ok(v) = serde_json::to_value(v) {
            self.details.insert(k.into(), v);
        }
    }

    pub fn seed_used(&mut self, k: &str, v: u64) {
        self.seeds.insert(k.into(), v.into());
    }

    pub fn write(&self, err: Option<&anyhow::Error>) -> Result<()> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir)?;
        let status = match (err, self.partial) {
            (Some(_), _) => "failed",
            (None, true) => "partial",
            (None, false) => "ok",
        };
        let rec = RunRecord {
            command: self.name,
            argv: &self.argv,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            workers: self.workers,
            config: &self.config,
            seeds: &self.seeds,
            outputs: &self.outputs,
            status,
            partial: self.partial || (err.is_some() && !self.outputs.is_empty()),
            error: err.map(|e| format!("{e:#}")),
            details: &self.details,
        };
        let path = dir.join(format!("run-record-{}.json", self.name));
        std::fs::write(path, serde_json::to_string_pretty(&rec)?)?;
        Ok(())
    }
}
