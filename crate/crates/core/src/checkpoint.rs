//! Binary model container.
//!
//! Layout: `RVTK`, format version (u32 LE), header length (u64 LE), UTF-8
//! JSON header, then every tensor as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{LayerSpec, OptimizerConfig, ParamStore, Tensor};
use crate::derev::DerevNetConfig;
use crate::error::{Error, Result};
use crate::signal::{NormStats, StftConfig};
use crate::t60net::T60NetConfig;
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"RVTK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    T60,
    Derev,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub spec: LayerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Running statistics rather than a learnable tensor.
    #[serde(default)]
    pub buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    /// Which parameter group the optimizer drove, e.g. `"t60"` or `"derev"`.
    pub group: String,
    pub config: OptimizerConfig,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    /// Precision the weights were trained in; blobs are always f32.
    pub precision: String,
    pub seed: u64,
    pub t60: Option<T60NetConfig>,
    pub derev: Option<DerevNetConfig>,
    pub layers: Vec<NamedLayer>,
    pub tensors: Vec<TensorEntry>,
    pub optimizers: Vec<OptimizerRecord>,
    pub history: Vec<EpochRecord>,
    pub norm_stats: Option<NormStats>,
    pub stft: Option<StftConfig>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointHeader {
    pub fn new(kind: ModelKind, precision: &str, seed: u64) -> Self {
        Self {
            kind,
            precision: precision.to_string(),
            seed,
            t60: None,
            derev: None,
            layers: Vec::new(),
            tensors: Vec::new(),
            optimizers: Vec::new(),
            history: Vec::new(),
            norm_stats: None,
            stft: None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    blobs: Vec<Vec<f32>>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Self {
            header: CheckpointHeader {
                tensors: Vec::new(),
                ..header
            },
            blobs: Vec::new(),
        }
    }

    /// Appends every tensor of `store` (learnables and buffers) in store order.
    pub fn add_store<T: Scalar>(&mut self, store: &ParamStore<T>) -> Result<()> {
        for (_, p) in store.iter() {
            self.push(&p.name, p.value.cast::<f32>(), p.buffer)?;
        }
        Ok(())
    }

    pub fn push(&mut self, name: &str, t: Tensor<f32>, buffer: bool) -> Result<()> {
        if self.index(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
        }
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            buffer,
        });
        self.blobs.push(t.into_data());
        Ok(())
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.header.tensors.iter().position(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor<f32>> {
        let i = self.index(name)?;
        Tensor::new(self.header.tensors[i].shape.clone(), self.blobs[i].clone()).ok()
    }

    /// Copies every tensor of `store` from the container by name.
    ///
    /// A missing tensor or a shape difference is a migration error naming
    /// both shapes.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let want = store.get(id).value.shape().to_vec();
            let i = self
                .index(&name)
                .ok_or_else(|| Error::Migration(format!("checkpoint has no tensor {name}")))?;
            let have = &self.header.tensors[i].shape;
            if *have != want {
                return Err(Error::Migration(format!(
                    "tensor {name}: checkpoint shape {have:?}, model expects {want:?}"
                )));
            }
            let data = self.blobs[i].iter().map(|&v| T::lit(v as f64)).collect();
            store.replace(id, Tensor::new(want, data)?);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n: usize = self.blobs.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blobs {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fmt_err("not an RVTK checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fmt_err(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| fmt_err("truncated checkpoint header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut pos = 16 + hlen;
        let mut blobs = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| fmt_err(format!("truncated data for tensor {}", e.name)))?;
            blobs.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes after tensor data", bytes.len() - pos)));
        }
        Ok(Self { header, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut h = CheckpointHeader::new(ModelKind::Derev, "f64", 9);
        h.history.push(EpochRecord {
            epoch: 0,
            train_loss: 0.5,
            val_loss: Some(0.25),
            metrics: BTreeMap::from([("mse".into(), 0.1)]),
        });
        let mut c = Checkpoint::new(h);
        c.push("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.0]).unwrap(), false)
            .unwrap();
        c.push("a.running_mean", Tensor::from_vec(vec![0.25]), true).unwrap();
        c
    }

    #[test]
    fn byte_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RVTK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE0000000000000000"), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Format(_))));
    }

    #[test]
    fn restore_checks_shapes() {
        let c = sample();
        let mut s = ParamStore::<f64>::new();
        let id = s.add("a.weight", Tensor::zeros(&[2, 3]));
        s.add_buffer("a.running_mean", Tensor::zeros(&[1]));
        c.restore_into(&mut s).unwrap();
        assert_eq!(s.value(id).data()[2], 3.5);

        let mut bad = ParamStore::<f64>::new();
        bad.add("a.weight", Tensor::zeros(&[3, 2]));
        let e = c.restore_into(&mut bad).unwrap_err();
        assert!(matches!(e, Error::Migration(ref m) if m.contains("[2, 3]") && m.contains("[3, 2]")));

        let mut missing = ParamStore::<f64>::new();
        missing.add("b.weight", Tensor::zeros(&[1]));
        assert!(matches!(c.restore_into(&mut missing), Err(Error::Migration(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        assert!(c.push("a.weight", Tensor::from_vec(vec![1.0]), false).is_err());
    }
}
