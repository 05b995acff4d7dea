//! Composite T60 estimator: convolutional extractor, regression branch and
//! classification branch with an expectation-based regression output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Layer, LayerSpec, Mode, ParamId, ParamStore, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointHeader, ModelKind, NamedLayer};
use crate::error::{invalid, shape_err, Error, Result};
use crate::signal::FeatureMap;
use crate::Scalar;

/// Nonlinearity placed after each batch norm of the extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T60NetConfig {
    pub class_times: Vec<f64>,
    /// Six extractor conv widths.
    pub conv_channels: Vec<usize>,
    pub cls_hidden1: usize,
    pub penultimate_dim: usize,
    pub reg_hidden: usize,
    pub reg_conv_channels: usize,
    /// Kernel and stride of the regression-branch average pool.
    pub reg_pool: usize,
    pub leaky_slope: f64,
    pub extractor_activation: Activation,
    /// Feature rows (three times the STFT bin count).
    pub input_rows: usize,
    /// Frames per example; longer maps are cropped, shorter zero-padded.
    pub input_frames: usize,
}

impl T60NetConfig {
    /// 13 classes from 0.3 s to 1.5 s, 771 x 397 input (6 s at 8 kHz).
    pub fn full() -> Self {
        Self {
            class_times: (3..=15).map(|i| i as f64 / 10.0).collect(),
            conv_channels: vec![16, 16, 32, 32, 64, 64],
            cls_hidden1: 512,
            penultimate_dim: 128,
            reg_hidden: 128,
            reg_conv_channels: 64,
            reg_pool: 3,
            leaky_slope: 0.1,
            extractor_activation: Activation::LeakyRelu,
            input_rows: 771,
            input_frames: 397,
        }
    }

    /// Narrow network for quick experiments.
    pub fn desk(class_times: Vec<f64>, input_rows: usize, input_frames: usize) -> Self {
        Self {
            class_times,
            conv_channels: vec![4, 4, 8, 8, 8, 8],
            cls_hidden1: 32,
            penultimate_dim: 16,
            reg_hidden: 16,
            reg_conv_channels: 8,
            reg_pool: 3,
            input_rows,
            input_frames,
            ..Self::full()
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_times.len()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.class_times.len() < 2 {
            return cfg("at least two class times are needed".into());
        }
        if !self.class_times.windows(2).all(|w| w[0] < w[1]) {
            return cfg(format!("class times must be strictly increasing: {:?}", self.class_times));
        }
        if self.conv_channels.len() != 6 || self.conv_channels.contains(&0) {
            return cfg(format!("six nonzero conv widths expected, got {:?}", self.conv_channels));
        }
        if [self.cls_hidden1, self.penultimate_dim, self.reg_hidden, self.reg_conv_channels, self.reg_pool]
            .contains(&0)
        {
            return cfg("layer widths and reg_pool must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return cfg(format!("leaky slope {} outside (0, 1)", self.leaky_slope));
        }
        let [_, h, w] = self.latent_shape();
        if h < self.reg_pool || w < self.reg_pool {
            return cfg(format!(
                "input {}x{} leaves a {h}x{w} latent, smaller than the {} pool",
                self.input_rows, self.input_frames, self.reg_pool
            ));
        }
        Ok(())
    }

    /// `[channels, rows, frames]` after three 2x2 floor poolings.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.conv_channels[5], self.input_rows / 8, self.input_frames / 8]
    }

    fn reg_flat(&self) -> usize {
        let [_, h, w] = self.latent_shape();
        let p = |n: usize| (n - self.reg_pool) / self.reg_pool + 1;
        self.reg_conv_channels * p(h) * p(w)
    }
}

/// Graph handles of one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct T60Vars {
    /// `[n]` regression-branch estimate.
    pub reg: Var,
    /// `[n, h]`.
    pub logits: Var,
    pub probs: Var,
    /// `[n]` expectation of the class times.
    pub creg: Var,
    /// `[n, penultimate_dim]`.
    pub penult: Var,
}

impl T60Vars {
    /// Completes the classification outputs from logits.
    pub fn from_logits<T: Scalar>(
        g: &mut Graph<T>,
        reg: Var,
        logits: Var,
        penult: Var,
        times: &[f64],
    ) -> Result<Self> {
        let s = g.shape(logits).to_vec();
        if s.len() != 2 || s[1] != times.len() {
            return Err(shape_err(&[s.first().copied().unwrap_or(0), times.len()], &s));
        }
        let n = s[0];
        let reg = g.reshape(reg, &[n])?;
        let probs = g.softmax(logits)?;
        let tv = g.constant(Tensor::new(vec![times.len(), 1], times.iter().map(|&t| T::lit(t)).collect())?);
        let creg = g.matmul(probs, tv)?;
        let creg = g.reshape(creg, &[n])?;
        Ok(Self {
            reg,
            logits,
            probs,
            creg,
            penult,
        })
    }

    pub fn outputs<T: Scalar>(&self, g: &Graph<T>) -> Vec<T60Outputs> {
        let f = |v: Var| g.data(v).iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
        let (reg, logits, probs, creg, pen) = (f(self.reg), f(self.logits), f(self.probs), f(self.creg), f(self.penult));
        let n = reg.len();
        let h = logits.len() / n.max(1);
        let p = pen.len() / n.max(1);
        (0..n)
            .map(|i| T60Outputs {
                reg_value: reg[i],
                class_logits: logits[i * h..(i + 1) * h].to_vec(),
                class_probs: probs[i * h..(i + 1) * h].to_vec(),
                creg_value: creg[i],
                penultimate: pen[i * p..(i + 1) * p].to_vec(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T60Outputs {
    pub reg_value: f64,
    pub class_logits: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub creg_value: f64,
    pub penultimate: Vec<f64>,
}

impl T60Outputs {
    pub fn argmax_class(&self) -> usize {
        argmax(&self.class_logits)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `sum_i p_i T_i`.
pub fn expected_t60(probs: &[f64], times: &[f64]) -> f64 {
    probs.iter().zip(times).map(|(p, t)| p * t).sum()
}

#[derive(Debug, Clone)]
pub struct T60Net<T> {
    pub cfg: T60NetConfig,
    pub store: ParamStore<T>,
    extractor: Vec<Layer>,
    reg: Vec<Layer>,
    cls_hidden: Vec<Layer>,
    cls_out: Layer,
}

fn forward_seq<T: Scalar>(layers: &[Layer], g: &mut Graph<T>, store: &mut ParamStore<T>, mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(g, store, x)?;
    }
    Ok(x)
}

impl<T: Scalar> T60Net<T> {
    pub fn new(cfg: T60NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let act = match cfg.extractor_activation {
            Activation::None => None,
            Activation::Relu => Some(LayerSpec::Relu),
            Activation::LeakyRelu => Some(LayerSpec::LeakyRelu { slope: cfg.leaky_slope }),
        };

        let mut extractor = Vec::new();
        let mut build = |spec: LayerSpec, name: String, out: &mut Vec<Layer>, store: &mut ParamStore<T>| -> Result<()> {
            out.push(Layer::build(spec, &name, store, &mut rng)?);
            Ok(())
        };
        let ch = &cfg.conv_channels;
        let mut cin = 1;
        for (i, &c) in ch.iter().enumerate() {
            let k = i + 1;
            build(
                LayerSpec::Conv2d {
                    in_channels: cin,
                    out_channels: c,
                    kernel: 3,
                },
                format!("t60.ext.conv{k}"),
                &mut extractor,
                &mut store,
            )?;
            build(LayerSpec::Batchnorm { channels: c }, format!("t60.ext.bn{k}"), &mut extractor, &mut store)?;
            if let Some(a) = &act {
                build(a.clone(), format!("t60.ext.act{k}"), &mut extractor, &mut store)?;
            }
            // Pools after conv 2, 4 and 5.
            if k == 2 || k == 4 || k == 5 {
                build(LayerSpec::Maxpool2x2, format!("t60.ext.pool{k}"), &mut extractor, &mut store)?;
            }
            cin = c;
        }

        let leaky = LayerSpec::LeakyRelu { slope: cfg.leaky_slope };
        let mut reg = Vec::new();
        let specs = [
            (
                LayerSpec::Conv2d {
                    in_channels: ch[5],
                    out_channels: cfg.reg_conv_channels,
                    kernel: 3,
                },
                "conv",
            ),
            (LayerSpec::Relu, "relu"),
            (
                LayerSpec::Avgpool {
                    kernel: cfg.reg_pool,
                    stride: cfg.reg_pool,
                },
                "pool",
            ),
            (LayerSpec::Flatten, "flatten"),
            (
                LayerSpec::FullyConnected {
                    in_dim: cfg.reg_flat(),
                    out_dim: cfg.reg_hidden,
                },
                "fc1",
            ),
            (LayerSpec::Batchnorm { channels: cfg.reg_hidden }, "bn1"),
            (leaky.clone(), "act1"),
            (
                LayerSpec::FullyConnected {
                    in_dim: cfg.reg_hidden,
                    out_dim: 1,
                },
                "fc2",
            ),
            (LayerSpec::Relu, "out_relu"),
        ];
        for (spec, n) in specs {
            build(spec, format!("t60.reg.{n}"), &mut reg, &mut store)?;
        }
        // Start the rectified output inside the class range rather than at a
        // possibly dead negative value.
        let mid = cfg.class_times.iter().sum::<f64>() / cfg.n_classes() as f64;
        let bias = store.find("t60.reg.fc2.bias").expect("registered above");
        store.replace(bias, Tensor::full(&[1], T::lit(mid)));

        let [c, h, w] = cfg.latent_shape();
        let mut cls_hidden = Vec::new();
        let specs = [
            (LayerSpec::Flatten, "flatten"),
            (
                LayerSpec::FullyConnected {
                    in_dim: c * h * w,
                    out_dim: cfg.cls_hidden1,
                },
                "fc1",
            ),
            (LayerSpec::Batchnorm { channels: cfg.cls_hidden1 }, "bn1"),
            (leaky.clone(), "act1"),
            (
                LayerSpec::FullyConnected {
                    in_dim: cfg.cls_hidden1,
                    out_dim: cfg.penultimate_dim,
                },
                "fc2",
            ),
            (LayerSpec::Batchnorm { channels: cfg.penultimate_dim }, "bn2"),
            (leaky, "act2"),
        ];
        for (spec, n) in specs {
            build(spec, format!("t60.cls.{n}"), &mut cls_hidden, &mut store)?;
        }
        let mut out = Vec::new();
        build(
            LayerSpec::FullyConnected {
                in_dim: cfg.penultimate_dim,
                out_dim: cfg.n_classes(),
            },
            "t60.cls.out".into(),
            &mut out,
            &mut store,
        )?;
        // Zero output weights: predictions start constant, so the correlation
        // terms drop out until the supervised terms have set the sign. Random
        // heads lock in whichever sign they start with.
        for name in ["t60.reg.fc2.weight", "t60.cls.out.weight"] {
            let id = store.find(name).expect("registered above");
            let shape = store.value(id).shape().to_vec();
            store.replace(id, Tensor::zeros(&shape));
        }
        Ok(Self {
            cfg,
            store,
            extractor,
            reg,
            cls_hidden,
            cls_out: out.pop().unwrap(),
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.extractor
            .iter()
            .chain(&self.reg)
            .chain(&self.cls_hidden)
            .chain(std::iter::once(&self.cls_out))
    }

    fn learnable_of(&self, layers: &[&Layer]) -> Vec<ParamId> {
        layers.iter().flat_map(|l| l.learnable(&self.store)).collect()
    }

    pub fn learnable(&self) -> Vec<ParamId> {
        self.store.learnable()
    }

    /// Extractor plus classification block: the tensors that receive
    /// gradients from the joint objective.
    pub fn classification_params(&self) -> Vec<ParamId> {
        let mut v: Vec<&Layer> = self.extractor.iter().chain(&self.cls_hidden).collect();
        v.push(&self.cls_out);
        self.learnable_of(&v)
    }

    pub fn extractor_params(&self) -> Vec<ParamId> {
        let v: Vec<&Layer> = self.extractor.iter().collect();
        self.learnable_of(&v)
    }

    /// Stacks normalized maps into `[n, 1, rows, input_frames]`.
    pub fn input_tensor(&self, maps: &[&FeatureMap<T>]) -> Result<Tensor<T>> {
        let (rows, frames) = (self.cfg.input_rows, self.cfg.input_frames);
        let mut data = vec![T::zero(); maps.len() * rows * frames];
        for (i, m) in maps.iter().enumerate() {
            if !m.is_normalized() {
                return Err(Error::Contract("T60 features must be normalized before inference".into()));
            }
            if m.rows() != rows {
                return Err(shape_err(&[rows, frames], &[m.rows(), m.frames()]));
            }
            let keep = m.frames().min(frames);
            for r in 0..rows {
                let o = (i * rows + r) * frames;
                data[o..o + keep].copy_from_slice(&m.row(r)[..keep]);
            }
        }
        Tensor::new(vec![maps.len(), 1, rows, frames], data)
    }

    /// Latent `[n, c, rows/8, frames/8]`.
    pub fn extract(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 1 || s[2] != self.cfg.input_rows || s[3] != self.cfg.input_frames {
            return Err(shape_err(&[s.first().copied().unwrap_or(0), 1, self.cfg.input_rows, self.cfg.input_frames], s));
        }
        forward_seq(&self.extractor, g, &mut self.store, x)
    }

    pub fn heads(&mut self, g: &mut Graph<T>, latent: Var) -> Result<T60Vars> {
        let [c, h, w] = self.cfg.latent_shape();
        let s = g.shape(latent);
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(shape_err(&[s.first().copied().unwrap_or(0), c, h, w], s));
        }
        let reg = forward_seq(&self.reg, g, &mut self.store, latent)?;
        let penult = forward_seq(&self.cls_hidden, g, &mut self.store, latent)?;
        let logits = self.cls_out.forward(g, &mut self.store, penult)?;
        T60Vars::from_logits(g, reg, logits, penult, &self.cfg.class_times)
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<T60Vars> {
        let latent = self.extract(g, x)?;
        self.heads(g, latent)
    }

    /// Eval-mode outputs for a batch of normalized maps.
    pub fn infer(&mut self, maps: &[&FeatureMap<T>]) -> Result<Vec<T60Outputs>> {
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.input_tensor(maps)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let xv = g.constant(x);
        let v = self.forward(&mut g, xv)?;
        Ok(v.outputs(&g))
    }

    pub fn checkpoint_header(&self, seed: u64) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(ModelKind::T60, T::PRECISION, seed);
        h.t60 = Some(self.cfg.clone());
        h.layers = self.named_layers();
        h
    }

    pub fn named_layers(&self) -> Vec<NamedLayer> {
        self.layers()
            .map(|l| NamedLayer {
                name: l.name.clone(),
                spec: l.spec.clone(),
            })
            .collect()
    }

    /// Rebuilds the network described by a checkpoint header and loads its
    /// tensors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck
            .header
            .t60
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no T60 network config".into()))?;
        let mut net = Self::new(cfg, ck.header.seed)?;
        ck.restore_into(&mut net.store)?;
        Ok(net)
    }
}

/// Validates a requested class time against a grid.
pub fn check_on_grid(t60: f64, grid: &[f64]) -> Result<usize> {
    grid.iter()
        .position(|&g| (g - t60).abs() < 1e-9)
        .ok_or_else(|| invalid(format!("T60 {t60} s is not on the class grid {grid:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> T60NetConfig {
        T60NetConfig {
            conv_channels: vec![2, 2, 3, 3, 4, 4],
            cls_hidden1: 6,
            penultimate_dim: 5,
            reg_hidden: 4,
            reg_conv_channels: 3,
            ..T60NetConfig::desk(vec![0.3, 0.6, 0.9], 24, 24)
        }
    }

    fn normalized(rows: usize, frames: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let v = (0..rows * frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(rows, frames, v, true).unwrap()
    }

    #[test]
    fn latent_shapes_follow_floor_halving() {
        let mut c = T60NetConfig::full();
        assert_eq!(c.latent_shape(), [64, 96, 49]);
        c.input_frames = 442;
        assert_eq!(c.latent_shape(), [64, 96, 55]);
        c.validate().unwrap();
    }

    #[test]
    fn forward_shapes_and_probability_rows() {
        let mut net = T60Net::<f64>::new(tiny(), 1).unwrap();
        let maps: Vec<_> = (0..3).map(|i| normalized(24, 30, i)).collect();
        let refs: Vec<_> = maps.iter().collect();
        let x = net.input_tensor(&refs).unwrap();
        let mut g = Graph::new(Mode::Train, 0);
        let xv = g.constant(x);
        let lat = net.extract(&mut g, xv).unwrap();
        assert_eq!(g.shape(lat), &[3, 4, 3, 3]);
        let v = net.heads(&mut g, lat).unwrap();
        assert_eq!(g.shape(v.reg), &[3]);
        assert_eq!(g.shape(v.penult), &[3, 5]);
        for o in v.outputs(&g) {
            let s: f64 = o.class_probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(o.creg_value >= 0.3 - 1e-12 && o.creg_value <= 0.9 + 1e-12);
            assert!((expected_t60(&o.class_probs, &[0.3, 0.6, 0.9]) - o.creg_value).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_start_constant() {
        let mut net = T60Net::<f64>::new(tiny(), 2).unwrap();
        let maps: Vec<_> = (0..4).map(|i| normalized(24, 30, 10 + i)).collect();
        let outs = net.infer(&maps.iter().collect::<Vec<_>>()).unwrap();
        for o in &outs {
            assert_eq!(o.class_probs, outs[0].class_probs);
            assert!((o.creg_value - 0.6).abs() < 1e-12);
            assert!((o.reg_value - 0.6).abs() < 1e-12);
        }
        assert!(outs[0].penultimate != outs[1].penultimate);
    }

    #[test]
    fn unnormalized_input_is_a_contract_error() {
        let net = T60Net::<f64>::new(tiny(), 1).unwrap();
        let raw = FeatureMap::new(24, 24, vec![0.0; 576], false).unwrap();
        assert!(matches!(net.input_tensor(&[&raw]), Err(Error::Contract(_))));
    }

    #[test]
    fn eval_forward_ignores_dropout_seed() {
        let mut net = T60Net::<f64>::new(tiny(), 4).unwrap();
        let zero = FeatureMap::new(24, 24, vec![0.0; 576], true).unwrap();
        let run = |net: &mut T60Net<f64>, seed| {
            let x = net.input_tensor(&[&zero]).unwrap();
            let mut g = Graph::new(Mode::Eval, seed);
            let xv = g.constant(x);
            let v = net.forward(&mut g, xv).unwrap();
            v.outputs(&g)
        };
        assert_eq!(run(&mut net, 1), run(&mut net, 99));
    }

    #[test]
    fn one_hot_and_uniform_expectations() {
        let times = T60NetConfig::full().class_times;
        assert!((expected_t60(&vec![1.0 / 13.0; 13], &times) - 0.9).abs() < 1e-12);
        for i in 0..13 {
            let mut g = Graph::<f64>::new(Mode::Eval, 0);
            let mut z = vec![0.0; 13];
            z[i] = 800.0;
            let logits = g.constant(Tensor::new(vec![1, 13], z).unwrap());
            let reg = g.constant(Tensor::from_vec(vec![0.0]));
            let v = T60Vars::from_logits(&mut g, reg, logits, logits, &times).unwrap();
            assert_eq!(g.data(v.creg)[0], times[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let mut net = T60Net::<f64>::new(tiny(), 3).unwrap();
        let m = normalized(24, 24, 5);
        let before = net.infer(&[&m]).unwrap();
        let mut ck = Checkpoint::new(net.checkpoint_header(3));
        ck.add_store(&net.store).unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut back = T60Net::<f64>::from_checkpoint(&ck).unwrap();
        let after = back.infer(&[&m]).unwrap();
        // Blobs are f32.
        assert!((before[0].creg_value - after[0].creg_value).abs() < 1e-5);
        assert_eq!(ck.header.layers.len(), net.layers().count());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.class_times = vec![0.6, 0.3];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.input_rows = 8;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.conv_channels.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_check() {
        assert_eq!(check_on_grid(0.6, &[0.3, 0.6]).unwrap(), 1);
        assert!(check_on_grid(2.0, &[0.3, 0.6]).is_err());
    }

    proptest! {
        #[test]
        fn expectation_matches_brute_force(z in proptest::collection::vec(-20.0f64..20.0, 13)) {
            let times = T60NetConfig::full().class_times;
            let mut g = Graph::<f64>::new(Mode::Eval, 0);
            let logits = g.constant(Tensor::new(vec![1, 13], z.clone()).unwrap());
            let reg = g.constant(Tensor::from_vec(vec![0.0]));
            let v = T60Vars::from_logits(&mut g, reg, logits, logits, &times).unwrap();
            let probs = g.data(v.probs).to_vec();
            let brute: f64 = probs.iter().zip(&times).map(|(p, t)| p * t).sum();
            prop_assert!((g.data(v.creg)[0] - brute).abs() < 1e-12);
            prop_assert!(g.data(v.creg)[0] >= 0.3 - 1e-12 && g.data(v.creg)[0] <= 1.5 + 1e-12);
            prop_assert_eq!(argmax(&probs), argmax(&z));
        }
    }
}
