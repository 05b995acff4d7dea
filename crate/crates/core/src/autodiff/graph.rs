use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::Scalar;

use super::kernels;
use super::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Vec<T>),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Expand(Var),
    SumLast(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { a: Var, axis: usize, start: usize },
    PairwiseDiff(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Conv2d { x: Var, w: Var },
    MaxPool { a: Var, argmax: Vec<usize> },
    AvgPool { a: Var, k: usize, s: usize },
    BatchNorm(Box<BnSaved<T>>),
}

#[derive(Debug, Clone)]
struct BnSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
    param: Option<(u64, ParamId)>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Tape of operations recorded during one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        Err(shape_err(a, b))
    } else {
        Ok(())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn param_grads(&self, store: u64) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(move |n| match n.param {
            Some((s, id)) if s == store => Some((id, n.grad.as_deref()?)),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf that collects gradient when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.nodes[v.0].param = Some((store.store_id(), id));
        v
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.unary(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.unary(a, |x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        let ta = self.value(a);
        if c.len() != ta.len() {
            return Err(shape_err(ta.shape(), &[c.len()]));
        }
        let data = ta.data().iter().zip(&c).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(a, c), &[a]))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), n, k, m);
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `bias[c]` along axis 1 of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias);
        if sa.len() < 2 || sb != [sa[1]] {
            return Err(shape_err(&sa[1..2.min(sa.len())], sb));
        }
        let c = sa[1];
        let inner: usize = sa[2..].iter().product();
        let b = self.data(bias).to_vec();
        let mut data = self.data(a).to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % c];
        }
        let t = Tensor::new(sa, data)?;
        Ok(self.push(t, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| T::one() / (T::one() + (-x).exp()));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let t = self.unary(a, |x| if x > T::zero() { x } else { x * slope });
        self.push(t, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.abs());
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.sqrt());
        self.push(t, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s: T = d.iter().copied().sum::<T>() / T::of_usize(d.len().max(1));
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(shape_err(&[1], self.shape(a)));
        }
        let t = Tensor::full(shape, self.data(a)[0]);
        Ok(self.push(t, Op::Expand(a), &[a]))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let last = *s.last().ok_or_else(|| invalid("sum_last on a scalar"))?;
        let data: Vec<T> = self
            .data(a)
            .chunks(last.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let t = Tensor::new(s[..s.len() - 1].to_vec(), data)?;
        Ok(self.push(t, Op::SumLast(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err(&first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid(format!(
                "slice {start}..{} of axis {axis} in {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Slice { a, axis, start }, &[a]))
    }

    /// `[n] -> [n,n]` with entry `(i,j) = a_i - a_j`.
    pub fn pairwise_diff(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(shape_err(&[s.iter().product()], s));
        }
        let d = self.data(a);
        let n = d.len();
        let data = (0..n * n).map(|k| d[k / n] - d[k % n]).collect();
        let t = Tensor::new(vec![n, n], data)?;
        Ok(self.push(t, Op::PairwiseDiff(a), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let last = *s.last().ok_or_else(|| invalid("softmax on a scalar"))?;
        let mut data = self.data(a).to_vec();
        data.chunks_mut(last).for_each(kernels::softmax_in_place);
        let t = Tensor::new(s, data)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Mean cross-entropy of `[n,h]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err(&[targets.len(), 0], s));
        }
        let h = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= h) {
            return Err(invalid(format!("class index {bad} >= {h}")));
        }
        let mut total = T::zero();
        for (row, &t) in self.data(logits).chunks(h).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        let v = total / T::of_usize(targets.len().max(1));
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(v), op, &[logits]))
    }

    /// Stride-1 convolution with zero "same" padding; odd kernels only.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err(&sw, &sx));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(invalid("same padding needs odd kernel sizes"));
        }
        let geom = kernels::ConvGeom::new(&sx, &sw);
        let out = kernels::conv2d_forward(self.data(x), self.data(w), &geom);
        let t = Tensor::new(vec![sx[0], sw[0], sx[2], sx[3]], out)?;
        Ok(self.push(t, Op::Conv2d { x, w }, &[x, w]))
    }

    /// 2x2 max pooling, stride 2, floor on odd sizes.
    pub fn maxpool2x2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(invalid(format!("maxpool2x2 needs [n,c,h>=2,w>=2], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(a);
        let planes = s[0] * s[1];
        let mut data = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..ho {
                for x in 0..wo {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * x + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], ho, wo], data)?;
        Ok(self.push(t, Op::MaxPool { a, argmax }, &[a]))
    }

    /// `k x k` average pooling with stride `s`, floor on leftovers.
    pub fn avgpool(&mut self, a: Var, k: usize, stride: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 4 || k == 0 || stride == 0 || sh[2] < k || sh[3] < k {
            return Err(invalid(format!("avgpool {k}/{stride} on {sh:?}")));
        }
        let (h, w) = (sh[2], sh[3]);
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let src = self.data(a);
        let norm = T::one() / T::of_usize(k * k);
        let mut data = Vec::with_capacity(sh[0] * sh[1] * ho * wo);
        for p in 0..sh[0] * sh[1] {
            let base = p * h * w;
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        let row = base + (y * stride + dy) * w + x * stride;
                        acc += src[row..row + k].iter().copied().sum::<T>();
                    }
                    data.push(acc * norm);
                }
            }
        }
        let t = Tensor::new(vec![sh[0], sh[1], ho, wo], data)?;
        Ok(self.push(t, Op::AvgPool { a, k, s: stride }, &[a]))
    }

    /// Batch normalization over axis 1. In eval mode, or when `running`
    /// is given with `use_running`, the supplied statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid(format!("batch norm needs [n,c,..], got {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(&[c], self.shape(gamma)));
        }
        let inner: usize = s[2..].iter().product();
        let n = s[0];
        let m = n * inner;
        let xd = self.data(x);
        let train = running.is_none();
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                if m < 2 {
                    return Err(invalid("batch norm in train mode needs more than one value per channel"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * inner;
                        acc += xd[o..o + inner].iter().copied().sum::<T>();
                    }
                    let mu = acc / T::of_usize(m);
                    let mut sq = T::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * inner;
                        sq += xd[o..o + inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::of_usize(m);
                }
                (mean, var)
            }
        };
        if mean.len() != c || var.len() != c {
            return Err(shape_err(&[c], &[mean.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma).to_vec();
        let bt = self.data(beta).to_vec();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / inner) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + bt[ch];
        }
        let stats = train.then(|| BnStats {
            var_unbiased: var
                .iter()
                .map(|&v| v * T::of_usize(m) / T::of_usize(m - 1))
                .collect(),
            mean,
        });
        let t = Tensor::new(s, out)?;
        let saved = BnSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok((self.push(t, Op::BatchNorm(Box::new(saved)), &[x, gamma, beta]), stats))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, a: Var, rate: T) -> Result<Var> {
        if !(rate >= T::zero() && rate < T::one()) {
            return Err(invalid(format!("dropout rate {rate} outside [0,1)")));
        }
        if self.mode == Mode::Eval || rate == T::zero() {
            return Ok(a);
        }
        let keep = T::one() - rate;
        let p = rate.to_f64_lossy();
        let scale = T::one() / keep;
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        self.mul_const(a, mask)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::InvalidState(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, node, &g);
            node.grad = Some(g);
        }
        Ok(())
    }
}

fn acc<T: Scalar>(nodes: &mut [Node<T>], v: Var, g: &[T]) {
    let n = &mut nodes[v.0];
    if n.requires_grad {
        add_into(&mut n.grad, g);
    }
}

fn wants<T: Scalar>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn val<T: Scalar>(nodes: &[Node<T>], v: Var) -> &[T] {
    nodes[v.0].value.data()
}

fn map_grad<T: Scalar>(g: &[T], x: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(x).map(|(&gi, &xi)| f(gi, xi)).collect()
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            acc(nodes, a, g);
            acc(nodes, b, g);
        }
        &Op::Sub(a, b) => {
            acc(nodes, a, g);
            if wants(nodes, b) {
                let ng: Vec<T> = g.iter().map(|&v| -v).collect();
                acc(nodes, b, &ng);
            }
        }
        &Op::Mul(a, b) => {
            let ga = wants(nodes, a).then(|| map_grad(g, val(nodes, b), |gi, y| gi * y));
            let gb = wants(nodes, b).then(|| map_grad(g, val(nodes, a), |gi, x| gi * x));
            if let Some(ga) = ga {
                acc(nodes, a, &ga);
            }
            if let Some(gb) = gb {
                acc(nodes, b, &gb);
            }
        }
        &Op::Div(a, b) => {
            let ga = wants(nodes, a).then(|| map_grad(g, val(nodes, b), |gi, y| gi / y));
            let gb = wants(nodes, b).then(|| {
                g.iter()
                    .zip(out)
                    .zip(val(nodes, b))
                    .map(|((&gi, &o), &y)| -gi * o / y)
                    .collect::<Vec<T>>()
            });
            if let Some(ga) = ga {
                acc(nodes, a, &ga);
            }
            if let Some(gb) = gb {
                acc(nodes, b, &gb);
            }
        }
        &Op::Scale(a, c) => {
            let ga: Vec<T> = g.iter().map(|&v| v * c).collect();
            acc(nodes, a, &ga);
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => acc(nodes, a, g),
        Op::MulConst(a, c) => {
            let ga = map_grad(g, c, |gi, m| gi * m);
            acc(nodes, *a, &ga);
        }
        &Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let ga = wants(nodes, a).then(|| kernels::matmul_bt(g, val(nodes, b), n, m, k));
            let gb = wants(nodes, b).then(|| kernels::matmul_at(val(nodes, a), g, n, k, m));
            if let Some(ga) = ga {
                acc(nodes, a, &ga);
            }
            if let Some(gb) = gb {
                acc(nodes, b, &gb);
            }
        }
        &Op::AddBias(a, bias) => {
            acc(nodes, a, g);
            if wants(nodes, bias) {
                let s = node.value.shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let mut gb = vec![T::zero(); c];
                for (i, &v) in g.iter().enumerate() {
                    gb[(i / inner) % c] += v;
                }
                acc(nodes, bias, &gb);
            }
        }
        &Op::Sigmoid(a) => {
            let ga = map_grad(g, out, |gi, y| gi * y * (T::one() - y));
            acc(nodes, a, &ga);
        }
        &Op::Tanh(a) => {
            let ga = map_grad(g, out, |gi, y| gi * (T::one() - y * y));
            acc(nodes, a, &ga);
        }
        &Op::Relu(a) => {
            let ga = map_grad(g, val(nodes, a), |gi, x| if x > T::zero() { gi } else { T::zero() });
            acc(nodes, a, &ga);
        }
        &Op::LeakyRelu(a, slope) => {
            let ga = map_grad(g, val(nodes, a), |gi, x| if x > T::zero() { gi } else { gi * slope });
            acc(nodes, a, &ga);
        }
        &Op::Abs(a) => {
            let ga = map_grad(g, val(nodes, a), |gi, x| {
                if x > T::zero() {
                    gi
                } else if x < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            });
            acc(nodes, a, &ga);
        }
        &Op::Sqrt(a) => {
            let ga = map_grad(g, out, |gi, y| {
                if y > T::zero() {
                    gi / (y + y)
                } else {
                    T::zero()
                }
            });
            acc(nodes, a, &ga);
        }
        &Op::Square(a) => {
            let ga = map_grad(g, val(nodes, a), |gi, x| gi * (x + x));
            acc(nodes, a, &ga);
        }
        &Op::Sum(a) => {
            let ga = vec![g[0]; nodes[a.0].value.len()];
            acc(nodes, a, &ga);
        }
        &Op::Mean(a) => {
            let n = nodes[a.0].value.len();
            let ga = vec![g[0] / T::of_usize(n.max(1)); n];
            acc(nodes, a, &ga);
        }
        &Op::Expand(a) => {
            let s: T = g.iter().copied().sum();
            acc(nodes, a, &[s]);
        }
        &Op::SumLast(a) => {
            let s = nodes[a.0].value.shape();
            let last = s[s.len() - 1];
            let ga: Vec<T> = g.iter().flat_map(|&v| std::iter::repeat(v).take(last)).collect();
            acc(nodes, a, &ga);
        }
        Op::Concat(parts, axis) => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.shape()[*axis] * inner;
                if wants(nodes, p) {
                    let mut gp = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                    }
                    acc(nodes, p, &gp);
                }
                offset += w;
            }
        }
        &Op::Slice { a, axis, start } => {
            let s = nodes[a.0].value.shape().to_vec();
            let len = node.value.shape()[axis];
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut ga = vec![T::zero(); s.iter().product()];
            for o in 0..outer {
                let dst = (o * s[axis] + start) * inner;
                let src = o * len * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            acc(nodes, a, &ga);
        }
        &Op::PairwiseDiff(a) => {
            let n = nodes[a.0].value.len();
            let mut ga = vec![T::zero(); n];
            for i in 0..n {
                for j in 0..n {
                    let v = g[i * n + j];
                    ga[i] += v;
                    ga[j] -= v;
                }
            }
            acc(nodes, a, &ga);
        }
        &Op::Softmax(a) => {
            let last = *node.value.shape().last().unwrap();
            let mut ga = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(last).zip(out.chunks(last)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                ga.extend(gr.iter().zip(yr).map(|(&gi, &y)| y * (gi - dot)));
            }
            acc(nodes, a, &ga);
        }
        Op::CrossEntropy { logits, targets } => {
            let h = nodes[logits.0].value.shape()[1];
            let scale = g[0] / T::of_usize(targets.len());
            let mut ga = val(nodes, *logits).to_vec();
            for (row, &t) in ga.chunks_mut(h).zip(targets) {
                kernels::softmax_in_place(row);
                row[t] -= T::one();
                row.iter_mut().for_each(|v| *v *= scale);
            }
            acc(nodes, *logits, &ga);
        }
        &Op::Conv2d { x, w } => {
            let geom = kernels::ConvGeom::new(nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let gw = wants(nodes, w).then(|| kernels::conv2d_grad_w(g, val(nodes, x), &geom));
            let gx = wants(nodes, x).then(|| kernels::conv2d_grad_x(g, val(nodes, w), &geom));
            if let Some(gw) = gw {
                acc(nodes, w, &gw);
            }
            if let Some(gx) = gx {
                acc(nodes, x, &gx);
            }
        }
        Op::MaxPool { a, argmax } => {
            let mut ga = vec![T::zero(); nodes[a.0].value.len()];
            for (&i, &v) in argmax.iter().zip(g) {
                ga[i] += v;
            }
            acc(nodes, *a, &ga);
        }
        &Op::AvgPool { a, k, s } => {
            let sh = nodes[a.0].value.shape().to_vec();
            let (h, w) = (sh[2], sh[3]);
            let os = node.value.shape();
            let (ho, wo) = (os[2], os[3]);
            let norm = T::one() / T::of_usize(k * k);
            let mut ga = vec![T::zero(); sh.iter().product()];
            for p in 0..sh[0] * sh[1] {
                for y in 0..ho {
                    for x in 0..wo {
                        let v = g[(p * ho + y) * wo + x] * norm;
                        for dy in 0..k {
                            let row = p * h * w + (y * s + dy) * w + x * s;
                            ga[row..row + k].iter_mut().for_each(|e| *e += v);
                        }
                    }
                }
            }
            acc(nodes, a, &ga);
        }
        Op::BatchNorm(bn) => {
            let s = node.value.shape();
            let c = s[1];
            let inner: usize = s[2..].iter().product();
            let n = s[0];
            let m = T::of_usize(n * inner);
            let gamma = val(nodes, bn.gamma).to_vec();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (i, (&gi, &xh)) in g.iter().zip(&bn.xhat).enumerate() {
                let ch = (i / inner) % c;
                dgamma[ch] += gi * xh;
                dbeta[ch] += gi;
            }
            if wants(nodes, bn.x) {
                let mut gx = vec![T::zero(); g.len()];
                for (i, ((&gi, &xh), o)) in g.iter().zip(&bn.xhat).zip(gx.iter_mut()).enumerate() {
                    let ch = (i / inner) % c;
                    let k = gamma[ch] * bn.inv_std[ch];
                    *o = if bn.train {
                        k * (gi - dbeta[ch] / m - xh * dgamma[ch] / m)
                    } else {
                        k * gi
                    };
                }
                acc(nodes, bn.x, &gx);
            }
            acc(nodes, bn.gamma, &dgamma);
            acc(nodes, bn.beta, &dbeta);
        }
    }
}
