use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Graph, Layer, LayerSpec, Mode, ParamStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps rounding noise on
/// near-zero gradients from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks gradients of an arbitrary scalar function of some leaves.
///
/// `f` builds the loss from leaf handles; it is re-run for every finite
/// difference, with a fresh graph seeded identically each time.
pub fn check_fn<F>(inputs: &[Tensor<f64>], seed: u64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |vals: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new(Mode::Train, seed);
        let leaves: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &leaves)?;
        let l = g.value(loss).item();
        if !want_grad {
            return Ok((l, Vec::new()));
        }
        g.backward(loss)?;
        let grads = leaves
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((l, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut vals = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..vals.len() {
        for i in 0..vals[k].len() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + FD_STEP;
            let (lp, _) = eval(&vals, false)?;
            vals[k].data_mut()[i] = orig - FD_STEP;
            let (lm, _) = eval(&vals, false)?;
            vals[k].data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, away_from_zero: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if away_from_zero {
                let m: f64 = rng.gen_range(0.1..1.0);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Max relative error between backward and central differences for one
/// layer, over its input and every learnable tensor.
pub fn grad_check(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let layer = Layer::build(spec.clone(), "layer", &mut store, &mut rng)?;
    let kinked = matches!(spec, LayerSpec::Relu | LayerSpec::LeakyRelu { .. });
    let x = random(input_shape, &mut rng, kinked);
    let mut weights: Option<Tensor<f64>> = None;

    let mut eval = |store: &ParamStore<f64>, x: &Tensor<f64>, want: bool| -> Result<(f64, ParamStore<f64>, Vec<f64>)> {
        let mut s = store.clone();
        let mut g = Graph::new(Mode::Train, seed);
        let xv = g.leaf(x.clone(), true);
        let y = layer.forward(&mut g, &mut s, xv)?;
        let w = weights
            .get_or_insert_with(|| {
                let shape = g.shape(y).to_vec();
                random(&shape, &mut rng, true).map(|v| v * 1.5)
            })
            .clone();
        let wv = g.constant(w);
        let p = g.mul(y, wv)?;
        let loss = g.sum(p);
        let l = g.value(loss).item();
        if !want {
            return Ok((l, s, Vec::new()));
        }
        s.zero_grad();
        g.backward(loss)?;
        s.absorb_grads(&g)?;
        let gx = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((l, s, gx))
    };

    let (_, analytic, gx) = eval(&store, &x, true)?;
    let mut worst: f64 = 0.0;
    let mut xs = x.clone();
    for i in 0..xs.len() {
        let orig = xs.data()[i];
        xs.data_mut()[i] = orig + FD_STEP;
        let lp = eval(&store, &xs, false)?.0;
        xs.data_mut()[i] = orig - FD_STEP;
        let lm = eval(&store, &xs, false)?.0;
        xs.data_mut()[i] = orig;
        worst = worst.max(relative_error(gx[i], (lp - lm) / (2.0 * FD_STEP)));
    }
    for id in layer.learnable(&store) {
        let a = analytic.get(id).grad.clone().unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        for (i, &ai) in a.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let lp = eval(&store, &x, false)?.0;
            store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let lm = eval(&store, &x, false)?.0;
            store.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(relative_error(ai, (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_connected() {
        let e = grad_check(&LayerSpec::FullyConnected { in_dim: 4, out_dim: 3 }, &[2, 4], 1).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn lstm() {
        let e = grad_check(&LayerSpec::Lstm { input_dim: 3, hidden: 8 }, &[5, 2, 3], 2).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        let e = grad_check(&LayerSpec::LeakyRelu { slope: 0.1 }, &[3, 5], 3).unwrap();
        assert!(e < 1e-8, "{e}");
    }

    #[test]
    fn every_layer_kind() {
        let cases: Vec<(LayerSpec, Vec<usize>)> = vec![
            (
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                },
                vec![2, 2, 4, 5],
            ),
            (LayerSpec::Batchnorm { channels: 3 }, vec![4, 3]),
            (LayerSpec::Batchnorm { channels: 2 }, vec![2, 2, 3, 3]),
            (LayerSpec::Maxpool2x2, vec![1, 2, 5, 4]),
            (LayerSpec::Avgpool { kernel: 3, stride: 3 }, vec![1, 2, 7, 6]),
            (LayerSpec::Dropout { rate: 0.5 }, vec![3, 6]),
            (LayerSpec::Relu, vec![3, 5]),
            (LayerSpec::Softmax, vec![3, 5]),
            (LayerSpec::Flatten, vec![2, 2, 3]),
        ];
        for (spec, shape) in cases {
            let e = grad_check(&spec, &shape, 11).unwrap();
            assert!(e < 1e-4, "{spec:?}: {e}");
        }
    }

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        random(shape, &mut ChaCha8Rng::seed_from_u64(seed), true)
    }

    #[test]
    fn elementwise_ops() {
        let a = t(&[2, 3], 1);
        let b = t(&[2, 3], 2).map(|v| v.abs() + 0.5);
        let e = check_fn(&[a, b], 0, |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let q = g.div(m, v[1])?;
            let r = g.sqrt(v[1]);
            let ab = g.abs(q);
            let sq = g.square(ab);
            let th = g.tanh(sq);
            let sg = g.sigmoid(r);
            let k = g.mul(th, sg)?;
            let k = g.scale(k, 0.7);
            let k = g.add_scalar(k, 0.2);
            Ok(g.mean(k))
        })
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn structural_ops() {
        let a = t(&[2, 3], 3);
        let b = t(&[2, 2], 4);
        let c = t(&[1], 5);
        let e = check_fn(&[a, b, c], 0, |g, v| {
            let cat = g.concat(&[v[0], v[1], v[0]], 1)?;
            let sl = g.slice(cat, 1, 2, 4)?;
            let rows = g.slice(sl, 0, 1, 1)?;
            let flat = g.reshape(rows, &[4])?;
            let pd = g.pairwise_diff(flat)?;
            let sg = g.sigmoid(pd);
            let rs = g.sum_last(sg)?;
            let ex = g.expand(v[2], &[4])?;
            let p = g.mul(rs, ex)?;
            let sq = g.square(p);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn matmul_bias_and_cross_entropy() {
        let x = t(&[3, 4], 6);
        let w = t(&[4, 5], 7);
        let b = t(&[5], 8);
        let e = check_fn(&[x, w, b], 0, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_bias(y, v[2])?;
            g.cross_entropy(y, &[0, 4, 2])
        })
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let w = g.leaf(Tensor::from_vec(vec![0.3, -0.2, 0.9]), true);
        let x = g.constant(Tensor::from_vec(vec![1.5, 2.0, -4.0]));
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.5, 2.0, -4.0]);
    }

    #[test]
    fn scalar_mse_gradient() {
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let w = g.leaf(Tensor::scalar(0.8), true);
        let target = g.scalar(0.3);
        let d = g.sub(w, target).unwrap();
        let sq = g.square(d);
        let l = g.mean(sq);
        g.backward(l).unwrap();
        assert!((g.grad(w).unwrap()[0] - 2.0 * (0.8 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = g.scale(w, 2.0);
        assert!(matches!(g.backward(y), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            grad_check(
                &LayerSpec::Lstm {
                    input_dim: 2,
                    hidden: 3,
                },
                &[3, 2, 2],
                9,
            )
            .unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
