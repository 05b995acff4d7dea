use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::Scalar;

use super::{Graph, Mode, ParamId, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    /// Normalizes axis 1 of `[n,c]` or `[n,c,h,w]` inputs.
    Batchnorm { channels: usize },
    Maxpool2x2,
    Avgpool { kernel: usize, stride: usize },
    FullyConnected { in_dim: usize, out_dim: usize },
    /// Input `[t,n,f]`, output `[t,n,hidden]`.
    Lstm { input_dim: usize, hidden: usize },
    Dropout { rate: f64 },
    Relu,
    LeakyRelu { slope: f64 },
    Softmax,
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => in_channels > 0 && out_channels > 0 && kernel % 2 == 1,
            LayerSpec::Batchnorm { channels } => channels > 0,
            LayerSpec::Avgpool { kernel, stride } => kernel > 0 && stride > 0,
            LayerSpec::FullyConnected { in_dim, out_dim } => in_dim > 0 && out_dim > 0,
            LayerSpec::Lstm { input_dim, hidden } => input_dim > 0 && hidden > 0,
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerSpec::LeakyRelu { slope } => slope > 0.0 && slope < 1.0,
            LayerSpec::Maxpool2x2 | LayerSpec::Relu | LayerSpec::Softmax | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid layer hyperparameters: {self:?}")))
        }
    }
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A layer bound to its tensors in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub name: String,
    params: Vec<ParamId>,
}

impl Layer {
    /// Registers the layer's tensors under `name` with seeded initial values.
    pub fn build<T: Scalar>(
        spec: LayerSpec,
        name: &str,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut add = |suffix: &str, t: Tensor<T>, store: &mut ParamStore<T>| {
            params.push(store.add(format!("{name}.{suffix}"), t));
        };
        let mut buffers = Vec::new();
        match spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let fan_in = in_channels * kernel * kernel;
                let bound = (6.0 / fan_in as f64).sqrt();
                add(
                    "weight",
                    uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
                    store,
                );
                add("bias", Tensor::zeros(&[out_channels]), store);
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                let bound = (6.0 / in_dim as f64).sqrt();
                add("weight", uniform(&[in_dim, out_dim], bound, rng), store);
                add("bias", Tensor::zeros(&[out_dim]), store);
            }
            LayerSpec::Lstm { input_dim, hidden } => {
                let bound = 1.0 / (hidden as f64).sqrt();
                add("w_ih", uniform(&[input_dim, 4 * hidden], bound, rng), store);
                add("w_hh", uniform(&[hidden, 4 * hidden], bound, rng), store);
                add("bias", uniform(&[4 * hidden], bound, rng), store);
            }
            LayerSpec::Batchnorm { channels } => {
                add("gamma", Tensor::full(&[channels], T::one()), store);
                add("beta", Tensor::zeros(&[channels]), store);
                buffers.push(store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])));
                buffers.push(
                    store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
                );
            }
            _ => {}
        }
        params.extend(buffers);
        Ok(Self {
            spec,
            name: name.to_string(),
            params,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Learnable tensors only (running statistics excluded).
    pub fn learnable<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        self.params.iter().copied().filter(|&p| !store.get(p).buffer).collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var) -> Result<Var> {
        match self.spec {
            LayerSpec::Conv2d { in_channels, .. } => {
                let s = g.shape(x);
                if s.len() != 4 || s[1] != in_channels {
                    return Err(shape_err(&[0, in_channels, 0, 0], s));
                }
                let w = g.param(store, self.params[0]);
                let b = g.param(store, self.params[1]);
                let y = g.conv2d(x, w)?;
                g.add_bias(y, b)
            }
            LayerSpec::FullyConnected { in_dim, .. } => {
                let s = g.shape(x);
                if s.len() != 2 || s[1] != in_dim {
                    return Err(shape_err(&[s.first().copied().unwrap_or(0), in_dim], s));
                }
                let w = g.param(store, self.params[0]);
                let b = g.param(store, self.params[1]);
                let y = g.matmul(x, w)?;
                g.add_bias(y, b)
            }
            LayerSpec::Lstm { input_dim, hidden } => self.lstm(g, store, x, input_dim, hidden),
            LayerSpec::Batchnorm { channels } => {
                let s = g.shape(x);
                if s.len() < 2 || s[1] != channels {
                    return Err(shape_err(&[0, channels], s));
                }
                let gamma = g.param(store, self.params[0]);
                let beta = g.param(store, self.params[1]);
                let eps = T::lit(BN_EPS);
                if g.mode() == Mode::Eval {
                    let rm = store.value(self.params[2]).data().to_vec();
                    let rv = store.value(self.params[3]).data().to_vec();
                    return Ok(g.batch_norm(x, gamma, beta, Some((&rm, &rv)), eps)?.0);
                }
                let (y, stats) = g.batch_norm(x, gamma, beta, None, eps)?;
                if let Some(st) = stats {
                    let mom = T::lit(BN_MOMENTUM);
                    for (id, batch) in [(self.params[2], st.mean), (self.params[3], st.var_unbiased)] {
                        let p = store.get_mut(id);
                        for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                            *r = (T::one() - mom) * *r + mom * b;
                        }
                    }
                }
                Ok(y)
            }
            LayerSpec::Maxpool2x2 => g.maxpool2x2(x),
            LayerSpec::Avgpool { kernel, stride } => g.avgpool(x, kernel, stride),
            LayerSpec::Dropout { rate } => g.dropout(x, T::lit(rate)),
            LayerSpec::Relu => Ok(g.relu(x)),
            LayerSpec::LeakyRelu { slope } => Ok(g.leaky_relu(x, T::lit(slope))),
            LayerSpec::Softmax => g.softmax(x),
            LayerSpec::Flatten => {
                let s = g.shape(x).to_vec();
                let n = *s.first().ok_or_else(|| invalid("flatten of a scalar"))?;
                let rest = s[1..].iter().product();
                g.reshape(x, &[n, rest])
            }
        }
    }

    fn lstm<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != input_dim {
            return Err(shape_err(&[0, 0, input_dim], &s));
        }
        let (steps, n) = (s[0], s[1]);
        let w_ih = g.param(store, self.params[0]);
        let w_hh = g.param(store, self.params[1]);
        let bias = g.param(store, self.params[2]);
        let flat = g.reshape(x, &[steps * n, input_dim])?;
        let proj = g.matmul(flat, w_ih)?;
        let proj = g.add_bias(proj, bias)?;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut gates = g.slice(proj, 0, t * n, n)?;
            if let Some(hp) = h {
                let rec = g.matmul(hp, w_hh)?;
                gates = g.add(gates, rec)?;
            }
            let gi = g.slice(gates, 1, 0, hidden)?;
            let gf = g.slice(gates, 1, hidden, hidden)?;
            let gg = g.slice(gates, 1, 2 * hidden, hidden)?;
            let go = g.slice(gates, 1, 3 * hidden, hidden)?;
            let i = g.sigmoid(gi);
            let cand = g.tanh(gg);
            let o = g.sigmoid(go);
            let ic = g.mul(i, cand)?;
            let cn = match c {
                Some(cp) => {
                    let f = g.sigmoid(gf);
                    let fc = g.mul(f, cp)?;
                    g.add(fc, ic)?
                }
                None => ic,
            };
            let tc = g.tanh(cn);
            let hn = g.mul(o, tc)?;
            outs.push(hn);
            h = Some(hn);
            c = Some(cn);
        }
        let all = g.concat(&outs, 0)?;
        g.reshape(all, &[steps, n, hidden])
    }
}
