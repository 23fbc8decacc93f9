//! Slice-level forward and backward kernels used by the tape.
//!
//! Every kernel runs sequentially in a fixed loop order so identical inputs
//! give bit-identical outputs.

use super::real::{lit, Real};
use super::tensor::strides;
use crate::error::{Error, Result};

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, (a, k, 1), (b, n, 1), (c, n, 1));
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    T::gemm_acc(m, n, k, (a, n, 1), (b, 1, n), (c, k, 1));
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(k, m, n, (a, 1, k), (b, n, 1), (c, n, 1));
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dims(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output position with the flat offsets of both operands.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    if inner == 0 {
        return;
    }
    let (step_a, step_b) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * step_a, ib + j * step_b);
        }
        o += inner;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        for (xr, yr) in x.chunks_exact(len).zip(y.chunks_exact_mut(len)) {
            let max = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (yv, &xv) in yr.iter_mut().zip(xr) {
                *yv = (xv - max).exp();
                sum += *yv;
            }
            let inv = T::one() / sum;
            yr.iter_mut().for_each(|v| *v *= inv);
        }
        return y;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..len {
                y[base + j * inner] *= inv;
            }
        }
    }
    y
}

/// `dx = y * (g - sum(g * y))` along the softmax axis.
pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    g: &[T],
    shape: &[usize],
    axis: usize,
    dx: &mut [T],
) {
    let (outer, len, inner) = axis_extents(shape, axis);
    if inner == 1 {
        let rows = y.chunks_exact(len).zip(g.chunks_exact(len));
        for ((yr, gr), dr) in rows.zip(dx.chunks_exact_mut(len)) {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d += yv * (gv - dot);
            }
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += g[base + j * inner] * y[base + j * inner];
            }
            for j in 0..len {
                let p = base + j * inner;
                dx[p] += y[p] * (g[p] - dot);
            }
        }
    }
}

/// Layer norm over rows of width `d`. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = lit::<T>(1.0 / d as f64);
    let eps = lit::<T>(eps);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let rows = g.len() / d;
    if let Some(dg) = dgain {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += g[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for j in 0..d {
                db[j] += g[r * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        let inv_d = lit::<T>(1.0 / d as f64);
        for r in 0..rows {
            let mut mean_dh = T::zero();
            let mut mean_dh_h = T::zero();
            for j in 0..d {
                let dh = g[r * d + j] * gain[j];
                mean_dh += dh;
                mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for j in 0..d {
                let p = r * d + j;
                let dh = g[p] * gain[j];
                dx[p] += rstd[r] * (dh - mean_dh - xhat[p] * mean_dh_h);
            }
        }
    }
}

/// Average pooling with kernel 2, stride 2 along the second-to-last axis.
pub(crate) fn avg_pool_forward<T: Real>(x: &[T], outer: usize, len: usize, ch: usize) -> Vec<T> {
    let half = len / 2;
    let mut y = vec![T::zero(); outer * half * ch];
    let h = lit::<T>(0.5);
    for o in 0..outer {
        for t in 0..half {
            for c in 0..ch {
                let a = x[(o * len + 2 * t) * ch + c];
                let b = x[(o * len + 2 * t + 1) * ch + c];
                y[(o * half + t) * ch + c] = (a + b) * h;
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward<T: Real>(g: &[T], dx: &mut [T], outer: usize, len: usize, ch: usize) {
    let half = len / 2;
    let h = lit::<T>(0.5);
    for o in 0..outer {
        for t in 0..half {
            for c in 0..ch {
                let gv = g[(o * half + t) * ch + c] * h;
                dx[(o * len + 2 * t) * ch + c] += gv;
                dx[(o * len + 2 * t + 1) * ch + c] += gv;
            }
        }
    }
}

/// Source coordinate of output position `i` for align-corners doubling:
/// `i * (L - 1) / (2L - 1)`, split into (lower index, fraction).
fn upsample_source(i: usize, len: usize) -> (usize, f64) {
    if len == 1 {
        return (0, 0.0);
    }
    let pos = i as f64 * (len - 1) as f64 / (2 * len - 1) as f64;
    let lo = (pos.floor() as usize).min(len - 2);
    (lo, pos - lo as f64)
}

/// Linear interpolation doubling the second-to-last axis, endpoints preserved.
pub(crate) fn upsample_forward<T: Real>(x: &[T], outer: usize, len: usize, ch: usize) -> Vec<T> {
    let out_len = 2 * len;
    let mut y = vec![T::zero(); outer * out_len * ch];
    for i in 0..out_len {
        let (lo, frac) = upsample_source(i, len);
        let (wl, wh) = (lit::<T>(1.0 - frac), lit::<T>(frac));
        let hi = (lo + 1).min(len - 1);
        for o in 0..outer {
            for c in 0..ch {
                let a = x[(o * len + lo) * ch + c];
                let b = x[(o * len + hi) * ch + c];
                y[(o * out_len + i) * ch + c] = a * wl + b * wh;
            }
        }
    }
    y
}

pub(crate) fn upsample_backward<T: Real>(g: &[T], dx: &mut [T], outer: usize, len: usize, ch: usize) {
    let out_len = 2 * len;
    for i in 0..out_len {
        let (lo, frac) = upsample_source(i, len);
        let (wl, wh) = (lit::<T>(1.0 - frac), lit::<T>(frac));
        let hi = (lo + 1).min(len - 1);
        for o in 0..outer {
            for c in 0..ch {
                let gv = g[(o * out_len + i) * ch + c];
                dx[(o * len + lo) * ch + c] += gv * wl;
                dx[(o * len + hi) * ch + c] += gv * wh;
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let (k, c, h) = (lit::<T>(GELU_K), lit::<T>(GELU_C), lit::<T>(0.5));
    h * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let (k, c, h) = (lit::<T>(GELU_K), lit::<T>(GELU_C), lit::<T>(0.5));
    let t = (k * (x + c * x * x * x)).tanh();
    h * (T::one() + t) + h * x * (T::one() - t * t) * k * (T::one() + lit::<T>(3.0) * c * x * x)
}

/// Generic axis permutation: `out.shape[i] = shape[axes[i]]`.
pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
