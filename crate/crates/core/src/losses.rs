//! Differentiable training objectives.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Result};
use crate::t60net::T60Vars;
use crate::Scalar;

/// Temperature of the pairwise-sigmoid soft ranks.
pub const SOFT_RANK_TAU: f64 = 0.1;
/// Centered sums of squares below this make a correlation term vanish.
pub const VARIANCE_EPS: f64 = 1e-12;

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {v} outside [0, 1]")))
    }
}

pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn centered<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let m = g.mean(x);
    let me = g.expand(m, &[n])?;
    g.sub(x, me)
}

fn sum_sq<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.data(v).iter().map(|x| x.to_f64_lossy().powi(2)).sum()
}

/// Pearson correlation of two `[n]` vectors, or `None` when either has
/// (numerically) zero variance.
pub fn pearson<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Option<Var>> {
    if g.shape(x) != g.shape(y) || g.shape(x).len() != 1 {
        return Err(crate::error::shape_err(g.shape(y), g.shape(x)));
    }
    let xc = centered(g, x)?;
    let yc = centered(g, y)?;
    if sum_sq(g, xc) < VARIANCE_EPS || sum_sq(g, yc) < VARIANCE_EPS {
        return Ok(None);
    }
    let xy = g.mul(xc, yc)?;
    let num = g.sum(xy);
    let xx = g.square(xc);
    let sxx = g.sum(xx);
    let yy = g.square(yc);
    let syy = g.sum(yy);
    let den = g.mul(sxx, syy)?;
    let den = g.sqrt(den);
    Ok(Some(g.div(num, den)?))
}

/// `r_i = sum_j sigmoid((x_i - x_j) / tau)`.
pub fn soft_rank<T: Scalar>(g: &mut Graph<T>, x: Var, tau: f64) -> Result<Var> {
    let d = g.pairwise_diff(x)?;
    let d = g.scale(d, T::lit(1.0 / tau));
    let s = g.sigmoid(d);
    g.sum_last(s)
}

/// Pearson correlation of soft ranks.
pub fn soft_spearman<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Option<Var>> {
    let rx = soft_rank(g, x, SOFT_RANK_TAU)?;
    let ry = soft_rank(g, y, SOFT_RANK_TAU)?;
    pearson(g, rx, ry)
}

/// `-|corr|`, or a zero constant when the correlation is undefined.
fn neg_abs<T: Scalar>(g: &mut Graph<T>, c: Option<Var>) -> Var {
    match c {
        Some(v) => {
            let a = g.abs(v);
            g.scale(a, -T::one())
        }
        None => g.scalar(T::zero()),
    }
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let s = g.scale(v, T::lit(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| invalid("empty loss"))
}

fn targets_var<T: Scalar>(g: &mut Graph<T>, t60: &[f64]) -> Var {
    g.constant(Tensor::from_vec(t60.iter().map(|&v| T::lit(v)).collect()))
}

fn check_targets<T: Scalar>(g: &Graph<T>, out: &T60Vars, t60: &[f64], classes: &[usize]) -> Result<()> {
    let n = g.value(out.creg).len();
    if t60.len() != n || classes.len() != n {
        return Err(invalid(format!(
            "batch of {n} predictions, {} T60 targets, {} class targets",
            t60.len(),
            classes.len()
        )));
    }
    Ok(())
}

/// Composite pretraining objective of the T60 estimator:
/// `b (a CE + (1-a) MSE_creg) + (1-b) MSE_reg - |r_reg| - |s_reg| - |r_cls| - |s_cls|`
/// with Pearson `r` and soft-rank Spearman `s` over the batch.
pub fn loss_pretrain<T: Scalar>(
    g: &mut Graph<T>,
    out: &T60Vars,
    t60: &[f64],
    classes: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    unit_interval("alpha", alpha)?;
    unit_interval("beta", beta)?;
    check_targets(g, out, t60, classes)?;
    if t60.len() < 2 {
        return Err(invalid("the correlation terms need a batch of at least 2"));
    }
    let y = targets_var(g, t60);
    let ce = g.cross_entropy(out.logits, classes)?;
    let mse_creg = mse(g, out.creg, y)?;
    let mse_reg = mse(g, out.reg, y)?;
    let r_reg = pearson(g, out.reg, y)?;
    let r_reg = neg_abs(g, r_reg);
    let s_reg = soft_spearman(g, out.reg, y)?;
    let s_reg = neg_abs(g, s_reg);
    let r_cls = pearson(g, out.creg, y)?;
    let r_cls = neg_abs(g, r_cls);
    let s_cls = soft_spearman(g, out.creg, y)?;
    let s_cls = neg_abs(g, s_cls);
    weighted_sum(
        g,
        &[
            (beta * alpha, ce),
            (beta * (1.0 - alpha), mse_creg),
            (1.0 - beta, mse_reg),
            (1.0, r_reg),
            (1.0, s_reg),
            (1.0, r_cls),
            (1.0, s_cls),
        ],
    )
}

/// Joint objective: `gamma (a CE + (1-a) MSE_creg) + (1-gamma) MSE_late`.
#[allow(clippy::too_many_arguments)]
pub fn loss_joint<T: Scalar>(
    g: &mut Graph<T>,
    out: &T60Vars,
    t60: &[f64],
    classes: &[usize],
    late_est: Var,
    late_target: Var,
    gamma: f64,
    alpha: f64,
) -> Result<Var> {
    unit_interval("gamma", gamma)?;
    unit_interval("alpha", alpha)?;
    check_targets(g, out, t60, classes)?;
    let y = targets_var(g, t60);
    let ce = g.cross_entropy(out.logits, classes)?;
    let mse_creg = mse(g, out.creg, y)?;
    let mse_late = mse(g, late_est, late_target)?;
    weighted_sum(
        g,
        &[
            (gamma * alpha, ce),
            (gamma * (1.0 - alpha), mse_creg),
            (1.0 - gamma, mse_late),
        ],
    )
}
