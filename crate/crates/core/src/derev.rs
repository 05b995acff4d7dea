//! LSTM late-reverberation estimator, spectral subtraction and the joint
//! network that feeds T60 penultimate features to the dereverberator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Layer, LayerSpec, Mode, ParamId, ParamStore, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointHeader, ModelKind, NamedLayer};
use crate::error::{invalid, shape_err, Error, Result};
use crate::signal::{
    compress_magnitude, extract_t60_features, istft, stft, AudioSignal, ComplexSpectrogram,
    CompressedMagnitude, NormStats, StftConfig,
};
use crate::t60net::{T60Net, T60Outputs, T60Vars};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerevNetConfig {
    /// STFT bins F; also the output width.
    pub bins: usize,
    /// Width of the injected T60 features; 0 for the standalone network.
    #[serde(default)]
    pub penultimate_dim: usize,
    pub lstm_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl DerevNetConfig {
    pub fn full(bins: usize) -> Self {
        Self {
            bins,
            penultimate_dim: 0,
            lstm_layers: 3,
            hidden: 512,
            dropout: 0.5,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.bins + self.penultimate_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.lstm_layers == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate dereverberation network: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DerevNet<T> {
    pub cfg: DerevNetConfig,
    pub store: ParamStore<T>,
    lstms: Vec<Layer>,
    drop: Layer,
    out: Layer,
}

impl<T: Scalar> DerevNet<T> {
    pub fn new(cfg: DerevNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut lstms = Vec::new();
        for i in 0..cfg.lstm_layers {
            let input_dim = if i == 0 { cfg.input_dim() } else { cfg.hidden };
            lstms.push(Layer::build(
                LayerSpec::Lstm {
                    input_dim,
                    hidden: cfg.hidden,
                },
                &format!("derev.lstm{}", i + 1),
                &mut store,
                &mut rng,
            )?);
        }
        let drop = Layer::build(LayerSpec::Dropout { rate: cfg.dropout }, "derev.dropout", &mut store, &mut rng)?;
        let out = Layer::build(
            LayerSpec::FullyConnected {
                in_dim: cfg.hidden,
                out_dim: cfg.bins,
            },
            "derev.out",
            &mut store,
            &mut rng,
        )?;
        Ok(Self {
            cfg,
            store,
            lstms,
            drop,
            out,
        })
    }

    pub fn learnable(&self) -> Vec<ParamId> {
        self.store.learnable()
    }

    pub fn output_params(&self) -> &[ParamId] {
        self.out.params()
    }

    pub fn named_layers(&self) -> Vec<NamedLayer> {
        self.lstms
            .iter()
            .chain([&self.drop, &self.out])
            .map(|l| NamedLayer {
                name: l.name.clone(),
                spec: l.spec.clone(),
            })
            .collect()
    }

    /// Appends `extra` zero rows to the first LSTM input projection so the
    /// network accepts concatenated features without changing its output.
    pub fn extend_input(&mut self, extra: usize) -> Result<()> {
        let first = &mut self.lstms[0];
        let id = first.params()[0];
        let old = self.store.value(id).clone();
        let cols = 4 * self.cfg.hidden;
        let rows = old.shape()[0];
        if old.shape() != [self.cfg.input_dim(), cols] || rows != self.cfg.input_dim() {
            return Err(Error::Migration(format!(
                "LSTM input weights {:?} do not match input width {}",
                old.shape(),
                self.cfg.input_dim()
            )));
        }
        let mut data = old.into_data();
        data.resize((rows + extra) * cols, T::zero());
        self.store.replace(id, Tensor::new(vec![rows + extra, cols], data)?);
        self.cfg.penultimate_dim += extra;
        first.spec = LayerSpec::Lstm {
            input_dim: self.cfg.input_dim(),
            hidden: self.cfg.hidden,
        };
        Ok(())
    }

    /// Late estimate `[t, n, bins]` from compressed magnitudes `[t, n, bins]`
    /// and optional per-utterance features `[n, penultimate_dim]`, repeated
    /// at every frame.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, feat: Option<Var>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.bins {
            return Err(shape_err(&[0, 0, self.cfg.bins], &s));
        }
        let (steps, n) = (s[0], s[1]);
        let p = self.cfg.penultimate_dim;
        let mut h = match feat {
            None if p > 0 => {
                return Err(invalid(format!("network expects {p} T60 features per utterance")));
            }
            None => x,
            Some(f) => {
                if g.shape(f) != [n, p] || p == 0 {
                    return Err(shape_err(&[n, p], g.shape(f)));
                }
                let one = g.reshape(f, &[1, n, p])?;
                let rep = g.concat(&vec![one; steps], 0)?;
                g.concat(&[x, rep], 2)?
            }
        };
        for (i, l) in self.lstms.iter().enumerate() {
            if i > 0 {
                h = self.drop.forward(g, &mut self.store, h)?;
            }
            h = l.forward(g, &mut self.store, h)?;
        }
        let flat = g.reshape(h, &[steps * n, self.cfg.hidden])?;
        let y = self.out.forward(g, &mut self.store, flat)?;
        let y = g.relu(y);
        g.reshape(y, &[steps, n, self.cfg.bins])
    }

    /// Eval-mode late estimate for one utterance.
    pub fn infer(&mut self, mag: &CompressedMagnitude<T>, feat: Option<&[f64]>) -> Result<CompressedMagnitude<T>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(sequence_tensor(&[mag])?);
        let f = feat.map(|f| g.constant(Tensor::new(vec![1, f.len()], f.iter().map(|&v| T::lit(v)).collect()).unwrap()));
        let y = self.forward(&mut g, x, f)?;
        CompressedMagnitude::new(mag.bins(), mag.frames(), g.data(y).to_vec())
    }

    pub fn checkpoint_header(&self, seed: u64) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(ModelKind::Derev, T::PRECISION, seed);
        h.derev = Some(self.cfg.clone());
        h.layers = self.named_layers();
        h
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck
            .header
            .derev
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no dereverberation config".into()))?;
        let mut net = Self::new(cfg, ck.header.seed)?;
        ck.restore_into(&mut net.store)?;
        Ok(net)
    }
}

/// Stacks equally long magnitudes time-major: `[frames, n, bins]`.
pub fn sequence_tensor<T: Scalar>(mags: &[&CompressedMagnitude<T>]) -> Result<Tensor<T>> {
    let first = mags.first().ok_or_else(|| invalid("empty batch"))?;
    let (bins, frames, n) = (first.bins(), first.frames(), mags.len());
    let mut data = vec![T::zero(); frames * n * bins];
    for (i, m) in mags.iter().enumerate() {
        if m.bins() != bins || m.frames() != frames {
            return Err(shape_err(&[bins, frames], &[m.bins(), m.frames()]));
        }
        for t in 0..frames {
            let o = (t * n + i) * bins;
            data[o..o + bins].copy_from_slice(m.frame(t));
        }
    }
    Tensor::new(vec![frames, n, bins], data)
}

/// `max(reverb - late, 0)` elementwise.
pub fn spectral_subtract<T: Scalar>(
    reverb: &CompressedMagnitude<T>,
    late: &CompressedMagnitude<T>,
) -> Result<CompressedMagnitude<T>> {
    reverb.same_shape(late)?;
    let v = reverb
        .values()
        .iter()
        .zip(late.values())
        .map(|(&r, &l)| (r - l).max(T::zero()))
        .collect();
    CompressedMagnitude::new(reverb.bins(), reverb.frames(), v)
}

/// Cubes the compressed magnitude, reattaches the reverberant phase and
/// inverts the STFT.
pub fn reconstruct_waveform<T: Scalar>(
    de_mag: &CompressedMagnitude<T>,
    reverb: &ComplexSpectrogram<T>,
) -> Result<AudioSignal<T>> {
    if de_mag.bins() != reverb.bins() || de_mag.frames() != reverb.frames() {
        return Err(shape_err(&[reverb.bins(), reverb.frames()], &[de_mag.bins(), de_mag.frames()]));
    }
    let data = de_mag
        .values()
        .iter()
        .zip(reverb.data())
        .map(|(&m, c)| {
            let theta = c.im.atan2(c.re);
            num_complex_from_polar(m * m * m, theta)
        })
        .collect();
    let spec = ComplexSpectrogram::from_frames(*reverb.config(), reverb.frames(), data, reverb.sample_rate())?;
    istft(&spec)
}

fn num_complex_from_polar<T: Scalar>(r: T, theta: T) -> rustfft::num_complex::Complex<T> {
    rustfft::num_complex::Complex::from_polar(r, theta)
}

/// T60 estimator and dereverberator trained together.
#[derive(Debug, Clone)]
pub struct JointNet<T> {
    pub t60: T60Net<T>,
    pub derev: DerevNet<T>,
    pub norm: NormStats,
    pub stft: StftConfig,
    pub sample_rate: u32,
}

impl<T: Scalar> JointNet<T> {
    /// Combines pretrained networks; the dereverberator gains zero input
    /// rows for the penultimate features.
    pub fn from_pretrained(
        t60: T60Net<T>,
        mut derev: DerevNet<T>,
        norm: NormStats,
        stft: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        if derev.cfg.penultimate_dim != 0 {
            return Err(Error::Migration(format!(
                "dereverberation network already takes {} extra inputs",
                derev.cfg.penultimate_dim
            )));
        }
        if derev.cfg.bins != stft.n_bins() || t60.cfg.input_rows != 3 * stft.n_bins() {
            return Err(Error::Migration(format!(
                "STFT has {} bins; dereverberation net expects {}, T60 net expects {} feature rows",
                stft.n_bins(),
                derev.cfg.bins,
                t60.cfg.input_rows
            )));
        }
        if norm.len() != t60.cfg.input_rows {
            return Err(Error::Migration(format!(
                "normalization covers {} rows, T60 net expects {}",
                norm.len(),
                t60.cfg.input_rows
            )));
        }
        derev.extend_input(t60.cfg.penultimate_dim)?;
        Ok(Self {
            t60,
            derev,
            norm,
            stft,
            sample_rate,
        })
    }

    /// `x_feat`: `[n, 1, rows, frames]` T60 features; `x_mag`: `[t, n, bins]`.
    pub fn forward(&mut self, g: &mut Graph<T>, x_feat: Var, x_mag: Var) -> Result<(T60Vars, Var)> {
        let t = self.t60.forward(g, x_feat)?;
        let late = self.derev.forward(g, x_mag, Some(t.penult))?;
        Ok((t, late))
    }

    pub fn checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut h = CheckpointHeader::new(ModelKind::Joint, T::PRECISION, seed);
        h.t60 = Some(self.t60.cfg.clone());
        h.derev = Some(self.derev.cfg.clone());
        h.layers = self.t60.named_layers();
        h.layers.extend(self.derev.named_layers());
        h.norm_stats = Some(self.norm.clone());
        h.stft = Some(self.stft);
        h.extra.insert("sample_rate".into(), self.sample_rate.into());
        let mut ck = Checkpoint::new(h);
        ck.add_store(&self.t60.store)?;
        ck.add_store(&self.derev.store)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Joint)?;
        let h = &ck.header;
        let t60 = T60Net::from_checkpoint(ck)?;
        let derev = DerevNet::from_checkpoint(ck)?;
        let norm = h.norm_stats.clone().ok_or_else(|| Error::Config("joint checkpoint lacks normalization".into()))?;
        let stft = h.stft.ok_or_else(|| Error::Config("joint checkpoint lacks its STFT config".into()))?;
        let sample_rate = h
            .extra
            .get("sample_rate")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("joint checkpoint lacks its sample rate".into()))? as u32;
        Ok(Self {
            t60,
            derev,
            norm,
            stft,
            sample_rate,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Enhanced<T> {
    pub signal: AudioSignal<T>,
    pub t60: T60Outputs,
}

/// Full inference path for one utterance.
pub fn enhance<T: Scalar>(x: &AudioSignal<T>, net: &mut JointNet<T>) -> Result<Enhanced<T>> {
    if x.sample_rate() != net.sample_rate {
        return Err(invalid(format!(
            "input is sampled at {} Hz, model expects {} Hz (no resampling is done)",
            x.sample_rate(),
            net.sample_rate
        )));
    }
    if x.len() < net.stft.window_len {
        return Err(invalid(format!(
            "input of {} samples is shorter than one {}-sample window",
            x.len(),
            net.stft.window_len
        )));
    }
    let spec = stft(x, &net.stft)?;
    let feats = extract_t60_features(&spec, Some(&net.norm))?;
    let t60 = net
        .t60
        .infer(&[&feats])?
        .pop()
        .ok_or_else(|| Error::InvalidState("no T60 output".into()))?;
    let mag = compress_magnitude(&spec);
    let late = net.derev.infer(&mag, Some(&t60.penultimate))?;
    let de = spectral_subtract(&mag, &late)?;
    let signal = reconstruct_waveform(&de, &spec)?;
    Ok(Enhanced { signal, t60 })
}
