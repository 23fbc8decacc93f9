//! Dynamic reverse-mode tape.
//!
//! A fresh [`Tape`] is built for every forward pass. Each operation appends a
//! node holding its value and the information needed to push gradients back to
//! its inputs; [`Tape::backward`] walks the nodes in reverse creation order.

use super::fft::RealFft;
use super::kernels as k;
use super::real::{lit, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    AvgPool(Var),
    Upsample(Var),
    Rfft(Var),
    Irfft(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Test fixtures that deliberately break a backward rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Softmax backward passes the upstream gradient through unchanged.
    SoftmaxBackward,
}

/// Computation graph of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            let d = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), d)
        } else {
            let shape = k::broadcast_shape(op_name, va.shape(), vb.shape())?;
            let mut out = vec![T::zero(); shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            k::for_each_broadcast(&shape, va.shape(), vb.shape(), |o, ia, ib| {
                out[o] = f(da[ia], db[ib]);
            });
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(data, make(a, b), &[a, b]))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = lit::<T>(s);
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = lit::<T>(s);
        let v = self.value(x).map(|e| e + s);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(k::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Batched matrix product `(.., m, k) x (.., k, n)` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dims("matmul", &sa, &sb));
        }
        let (m, kk, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = k::broadcast_shape("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .map_err(|_| Error::dims("matmul", &sa, &sb))?;
        let nb: usize = batch.iter().product();
        let mut out = vec![T::zero(); nb * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        k::for_each_broadcast(&batch, &sa[..sa.len() - 2], &sb[..sb.len() - 2], |o, ia, ib| {
            k::gemm_nn(
                &da[ia * m * kk..(ia + 1) * m * kk],
                &db[ib * kk * n..(ib + 1) * kk * n],
                &mut out[o * m * n..(o + 1) * m * n],
                m,
                kk,
                n,
            );
        });
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::precondition(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let y = k::softmax_forward(self.value(x).data(), &shape, axis);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes the last axis, then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dims("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::precondition("layer_norm", "eps must be positive"));
        }
        let (y, xhat, rstd) = k::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            eps,
        );
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Kernel-2 stride-2 average pooling along the second-to-last axis.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::precondition("avg_pool1d", "needs a (.., L, C) input"));
        }
        let (len, ch) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if len % 2 != 0 {
            return Err(Error::precondition(
                "avg_pool1d",
                format!("sequence length {len} is odd"),
            ));
        }
        let outer = shape[..shape.len() - 2].iter().product();
        let y = k::avg_pool_forward(self.value(x).data(), outer, len, ch);
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = len / 2;
        Ok(self.push(Tensor::from_parts(out_shape, y), Op::AvgPool(x), &[x]))
    }

    /// Align-corners linear interpolation from `L` to `target_len == 2L`
    /// along the second-to-last axis.
    pub fn upsample(&mut self, x: Var, target_len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::precondition("upsample_linear", "needs a (.., L, d) input"));
        }
        let (len, ch) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if target_len != 2 * len {
            return Err(Error::precondition(
                "upsample_linear",
                format!("target length {target_len} is not twice {len}"),
            ));
        }
        let outer = shape[..shape.len() - 2].iter().product();
        let y = k::upsample_forward(self.value(x).data(), outer, len, ch);
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = target_len;
        Ok(self.push(Tensor::from_parts(out_shape, y), Op::Upsample(x), &[x]))
    }

    /// Real FFT along the last axis: `(.., L) -> (.., N, 2)` with the
    /// trailing pair holding (real, imaginary).
    pub fn rfft(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().expect("rank >= 1");
        if len < 2 {
            return Err(Error::precondition("rfft", format!("length {len} is below 2")));
        }
        let plan = RealFft::new(len);
        let n = plan.bins();
        let rows = self.value(x).numel() / len;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * n * 2];
        let (mut re, mut im) = (vec![T::zero(); n], vec![T::zero(); n]);
        for r in 0..rows {
            plan.forward(&src[r * len..(r + 1) * len], &mut re, &mut im);
            for j in 0..n {
                out[(r * n + j) * 2] = re[j];
                out[(r * n + j) * 2 + 1] = im[j];
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = n;
        out_shape.push(2);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Rfft(x), &[x]))
    }

    /// Inverse of [`rfft`](Self::rfft): `(.., N, 2) -> (.., len)`.
    pub fn irfft(&mut self, x: Var, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != 2 || len < 2 || shape[r - 2] != len / 2 + 1 {
            return Err(Error::MalformedSpectrum(format!(
                "shape {shape:?} is not a half spectrum of a length-{len} signal"
            )));
        }
        let plan = RealFft::new(len);
        let n = plan.bins();
        let rows = self.value(x).numel() / (n * 2);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * len];
        let (mut re, mut im) = (vec![T::zero(); n], vec![T::zero(); n]);
        for row in 0..rows {
            for j in 0..n {
                re[j] = src[(row * n + j) * 2];
                im[j] = src[(row * n + j) * 2 + 1];
            }
            plan.inverse(&re, &im, &mut out[row * len..(row + 1) * len]);
        }
        let mut out_shape = shape[..r - 2].to_vec();
        out_shape.push(len);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Irfft(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::dims("reshape", self.shape(x), &shape));
        }
        let v = Tensor::from_parts(shape, self.value(x).data().to_vec());
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::precondition(
                "permute",
                format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (out_shape, y) = k::permute(self.value(x).data(), &shape, axes);
        Ok(self.push(
            Tensor::from_parts(out_shape, y),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::precondition("transpose", "rank below 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::precondition("concat", "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::dims("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = k::axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::precondition(
                "narrow",
                format!("range {start}..{} invalid on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = k::axis_extents(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            &[x],
        ))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::precondition("mean_axis", "axis out of range"));
        }
        let (outer, len, inner) = k::axis_extents(&shape, axis);
        let d = self.value(x).data();
        let inv = lit::<T>(1.0 / len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis { x, axis },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / lit::<T>(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Multiplies by a fixed mask (already scaled by `1 / keep_prob`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::precondition("dropout", "mask size mismatch"));
        }
        let v = self.value(x);
        let y: Vec<T> = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), y);
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls
    /// until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.nodes[id].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                self.reduce_broadcast(*a, out_shape, g, grads, |x, _, _| x);
                self.reduce_broadcast(*b, out_shape, g, grads, |x, _, _| if neg { -x } else { x });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.binary_backward(*a, *b, out_shape, g, grads, |gv, _, y| gv * y, |gv, x, _| gv * x, va, vb);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.binary_backward(
                    *a,
                    *b,
                    out_shape,
                    g,
                    grads,
                    |gv, _, y| gv / y,
                    |gv, x, y| -gv * x / (y * y),
                    va,
                    vb,
                );
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.accumulate(grads, *x) {
                    let two = lit::<T>(2.0);
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += two * gv * v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * k::gelu_grad(v);
                    }
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let fault = self.fault == Some(Fault::SoftmaxBackward);
                if let Some(dx) = self.accumulate(grads, *x) {
                    if fault {
                        dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                    } else {
                        k::softmax_backward(y, g, out_shape, *axis, dx);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().expect("rank >= 1");
                let gain_v = self.value(*gain).data().to_vec();
                let mut dx = self.accumulate(grads, *x).map(std::mem::take);
                let mut dg = self.accumulate(grads, *gain).map(std::mem::take);
                let mut db = self.accumulate(grads, *bias).map(std::mem::take);
                k::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    &gain_v,
                    d,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [(*x, dx), (*gain, dg), (*bias, db)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::AvgPool(x) => {
                let in_shape = self.shape(*x).to_vec();
                let r = in_shape.len();
                let outer = in_shape[..r - 2].iter().product();
                if let Some(dx) = self.accumulate(grads, *x) {
                    k::avg_pool_backward(g, dx, outer, in_shape[r - 2], in_shape[r - 1]);
                }
            }
            Op::Upsample(x) => {
                let in_shape = self.shape(*x).to_vec();
                let r = in_shape.len();
                let outer = in_shape[..r - 2].iter().product();
                if let Some(dx) = self.accumulate(grads, *x) {
                    k::upsample_backward(g, dx, outer, in_shape[r - 2], in_shape[r - 1]);
                }
            }
            Op::Rfft(x) => {
                let len = *self.shape(*x).last().expect("rank >= 1");
                let plan = RealFft::new(len);
                let n = plan.bins();
                if let Some(dx) = self.accumulate(grads, *x) {
                    let rows = dx.len() / len;
                    let (mut gre, mut gim) = (vec![T::zero(); n], vec![T::zero(); n]);
                    let mut buf = vec![T::zero(); len];
                    for r in 0..rows {
                        for j in 0..n {
                            gre[j] = g[(r * n + j) * 2];
                            gim[j] = g[(r * n + j) * 2 + 1];
                        }
                        plan.forward_adjoint(&gre, &gim, &mut buf);
                        for (d, &b) in dx[r * len..(r + 1) * len].iter_mut().zip(&buf) {
                            *d += b;
                        }
                    }
                }
            }
            Op::Irfft(x) => {
                let len = *out_shape.last().expect("rank >= 1");
                let plan = RealFft::new(len);
                let n = plan.bins();
                if let Some(dx) = self.accumulate(grads, *x) {
                    let rows = g.len() / len;
                    let (mut gre, mut gim) = (vec![T::zero(); n], vec![T::zero(); n]);
                    for r in 0..rows {
                        plan.inverse_adjoint(&g[r * len..(r + 1) * len], &mut gre, &mut gim);
                        for j in 0..n {
                            dx[(r * n + j) * 2] += gre[j];
                            dx[(r * n + j) * 2 + 1] += gim[j];
                        }
                    }
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = k::permute(g, out_shape, &inverse);
                if let Some(dx) = self.accumulate(grads, *x) {
                    dx.iter_mut().zip(&back).for_each(|(d, &b)| *d += b);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = k::axis_extents(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(dp) = self.accumulate(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut dp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, full, inner) = k::axis_extents(&in_shape, *axis);
                let len = out_shape[*axis];
                if let Some(dx) = self.accumulate(grads, *x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let dst = &mut dx[base..base + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, len, inner) = k::axis_extents(&in_shape, *axis);
                let inv = lit::<T>(1.0 / len as f64);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[(o * len + j) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let scale = if matches!(node.op, Op::MeanAll(_)) {
                    lit::<T>(1.0 / n as f64)
                } else {
                    T::one()
                };
                if let Some(dx) = self.accumulate(grads, *x) {
                    let gv = g[0] * scale;
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
        }
    }

    /// Pushes `f(g)` into `v`, summing over axes that were broadcast.
    fn reduce_broadcast(
        &self,
        v: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        f: impl Fn(T, usize, usize) -> T,
    ) {
        let in_shape = self.shape(v).to_vec();
        let Some(dv) = self.accumulate(grads, v) else { return };
        if in_shape == out_shape {
            for (i, (d, &gv)) in dv.iter_mut().zip(g).enumerate() {
                *d += f(gv, i, i);
            }
        } else {
            k::for_each_broadcast(out_shape, &in_shape, &in_shape, |o, i, _| {
                dv[i] += f(g[o], o, i);
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        da_rule: impl Fn(T, T, T) -> T,
        db_rule: impl Fn(T, T, T) -> T,
        va: &Tensor<T>,
        vb: &Tensor<T>,
    ) {
        let (xa, xb) = (va.data(), vb.data());
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if let Some(da) = self.accumulate(grads, a) {
            k::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                da[ia] += da_rule(g[o], xa[ia], xb[ib]);
            });
        }
        if let Some(db) = self.accumulate(grads, b) {
            k::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                db[ib] += db_rule(g[o], xa[ia], xb[ib]);
            });
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, kk, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = k::broadcast_shape("matmul", ba, bb).expect("checked in forward");
        let (da_val, db_val) = (self.value(a).data(), self.value(b).data());
        if let Some(da) = self.accumulate(grads, a) {
            k::for_each_broadcast(&batch, ba, bb, |o, ia, ib| {
                k::gemm_nt(
                    &g[o * m * n..(o + 1) * m * n],
                    &db_val[ib * kk * n..(ib + 1) * kk * n],
                    &mut da[ia * m * kk..(ia + 1) * m * kk],
                    m,
                    n,
                    kk,
                );
            });
        }
        if let Some(db) = self.accumulate(grads, b) {
            k::for_each_broadcast(&batch, ba, bb, |o, ia, ib| {
                k::gemm_tn(
                    &da_val[ia * m * kk..(ia + 1) * m * kk],
                    &g[o * m * n..(o + 1) * m * n],
                    &mut db[ib * kk * n..(ib + 1) * kk * n],
                    m,
                    kk,
                    n,
                );
            });
        }
    }
}
