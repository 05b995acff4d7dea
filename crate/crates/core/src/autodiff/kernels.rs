//! Dense kernels shared by forward and backward passes.
//!
//! Parallel loops split work over disjoint output blocks and keep a fixed
//! summation order inside each block, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::Scalar;

const PAR_WORK: usize = 1 << 15;

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn axpy<T: Scalar>(dst: &mut [T], a: T, x: &[T]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `a[n,k] * b[k,m]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    if m == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        for p in 0..k {
            axpy(o, a[i * k + p], &b[p * m..(p + 1) * m]);
        }
    };
    if n * k * m >= PAR_WORK {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

/// `g[n,m] * b[k,m]^T -> [n,k]`.
pub(crate) fn matmul_bt<T: Scalar>(g: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    if k == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        let gi = &g[i * m..(i + 1) * m];
        for (p, v) in o.iter_mut().enumerate() {
            *v = dot(gi, &b[p * m..(p + 1) * m]);
        }
    };
    if n * k * m >= PAR_WORK {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// `a[n,k]^T * g[n,m] -> [k,m]`.
pub(crate) fn matmul_at<T: Scalar>(a: &[T], g: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    if m == 0 {
        return out;
    }
    let row = |(p, o): (usize, &mut [T])| {
        for i in 0..n {
            axpy(o, a[i * k + p], &g[i * m..(i + 1) * m]);
        }
    };
    if n * k * m >= PAR_WORK {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], w: &[usize]) -> Self {
        Self {
            n: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: w[0],
            kh: w[2],
            kw: w[3],
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Valid output range for a kernel offset `d` along an axis of size `len`.
    fn span(d: isize, len: usize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d.max(0)).max(0) as usize;
        (lo.min(hi), hi)
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        (0..self.kh * self.kw).map(move |k| {
            let dy = (k / self.kw) as isize - ph;
            let dx = (k % self.kw) as isize - pw;
            (k, dy, dx)
        })
    }
}

/// `out[y,x] += wv * src[y+dy, x+dx]` over the valid region.
fn shifted_axpy<T: Scalar>(out: &mut [T], src: &[T], wv: T, dy: isize, dx: isize, h: usize, w: usize) {
    let (y0, y1) = ConvGeom::span(dy, h);
    let (x0, x1) = ConvGeom::span(dx, w);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let o = &mut out[y * w + x0..y * w + x1];
        let s0 = (x0 as isize + dx) as usize;
        axpy(o, wv, &src[sy * w + s0..sy * w + s0 + (x1 - x0)]);
    }
}

fn shifted_dot<T: Scalar>(g: &[T], src: &[T], dy: isize, dx: isize, h: usize, w: usize) -> T {
    let (y0, y1) = ConvGeom::span(dy, h);
    let (x0, x1) = ConvGeom::span(dx, w);
    let mut acc = T::zero();
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let s0 = (x0 as isize + dx) as usize;
        acc += dot(&g[y * w + x0..y * w + x1], &src[sy * w + s0..sy * w + s0 + (x1 - x0)]);
    }
    acc
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let kk = g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.co * plane];
    out.par_chunks_mut(plane.max(1)).enumerate().for_each(|(idx, o)| {
        let (b, co) = (idx / g.co, idx % g.co);
        for ci in 0..g.ci {
            let src = &x[(b * g.ci + ci) * plane..(b * g.ci + ci + 1) * plane];
            let wbase = (co * g.ci + ci) * kk;
            for (k, dy, dx) in g.offsets() {
                shifted_axpy(o, src, wt[wbase + k], dy, dx, g.h, g.w);
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_w<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let kk = g.kh * g.kw;
    let mut gw = vec![T::zero(); g.co * g.ci * kk];
    gw.par_chunks_mut(g.ci * kk).enumerate().for_each(|(co, blk)| {
        for b in 0..g.n {
            let go = &gout[(b * g.co + co) * plane..(b * g.co + co + 1) * plane];
            for ci in 0..g.ci {
                let src = &x[(b * g.ci + ci) * plane..(b * g.ci + ci + 1) * plane];
                for (k, dy, dx) in g.offsets() {
                    blk[ci * kk + k] += shifted_dot(go, src, dy, dx, g.h, g.w);
                }
            }
        }
    });
    gw
}

pub(crate) fn conv2d_grad_x<T: Scalar>(gout: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let kk = g.kh * g.kw;
    let mut gx = vec![T::zero(); g.n * g.ci * plane];
    gx.par_chunks_mut(plane.max(1)).enumerate().for_each(|(idx, o)| {
        let (b, ci) = (idx / g.ci, idx % g.ci);
        for co in 0..g.co {
            let go = &gout[(b * g.co + co) * plane..(b * g.co + co + 1) * plane];
            let wbase = (co * g.ci + ci) * kk;
            for (k, dy, dx) in g.offsets() {
                // out[y,x] used x[y+dy,x+dx]; scatter back with the opposite shift.
                shifted_axpy(o, go, wt[wbase + k], -dy, -dx, g.h, g.w);
            }
        }
    });
    gx
}
