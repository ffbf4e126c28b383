use std::rc::Rc;

use super::kernels::{col2im_add, gemm, im2col, ConvGeom};
use super::tape::{permute_apply, Op, LN_EPS, LOG_FLOOR};
use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Stride and padding of a 2-D convolution along (height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            pad: (0, 0),
        }
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(Rc::new(value), op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (big, small, swapped) = if suffix_broadcast(a.shape(), b.shape()) {
            (&a, &b, false)
        } else if suffix_broadcast(b.shape(), a.shape()) {
            (&b, &a, true)
        } else {
            bail!(Shape, "{name}: shapes {:?} and {:?} do not broadcast", a.shape(), b.shape());
        };
        let n = small.len();
        let data = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = small.data()[i % n];
                if swapped {
                    f(s, v)
                } else {
                    f(v, s)
                }
            })
            .collect();
        let value = Tensor::new(big.shape(), data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Rc::new(value), op(self.id, other.id), rg))
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v * k), Op::Scale(self.id, k))
    }

    pub fn offset(&self, k: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v + k), Op::Offset(self.id))
    }

    /// `(m, k) x (k, n)` product.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            bail!(Shape, "matmul: {:?} x {:?}", a.shape(), b.shape());
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Rc::new(Tensor::new(&[m, n], out)?),
            Op::MatMul(self.id, other.id),
            rg,
        ))
    }

    /// Multiplies the last axis by a `(k, n)` matrix, keeping leading axes.
    pub fn linear(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some((&k, lead)) = shape.split_last() else {
            bail!(Shape, "linear on a scalar");
        };
        let rows: usize = lead.iter().product();
        let y = self.reshape(&[rows, k])?.matmul(weight)?;
        let y = match bias {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut out_shape = lead.to_vec();
        out_shape.push(y.shape()[1]);
        y.reshape(&out_shape)
    }

    /// Channels-last convolution: input `(h, w, cin)`, weight `(kh, kw, cin, cout)`.
    pub fn conv2d(&self, weight: Var<'t>, opts: Conv2dOpts) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] {
            bail!(Shape, "conv2d: input {xs:?} with weight {ws:?}");
        }
        let (h, wd, c) = (xs[0], xs[1], xs[2]);
        let (kh, kw, o) = (ws[0], ws[1], ws[3]);
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.pad;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || wd + 2 * pw < kw {
            bail!(Shape, "conv2d: kernel ({kh}, {kw}) does not fit input ({h}, {wd})");
        }
        let geom = ConvGeom {
            h,
            w: wd,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / sh + 1,
            ow: (wd + 2 * pw - kw) / sw + 1,
        };
        let rows = geom.oh * geom.ow;
        let cols = kh * kw * c;
        let patches = im2col(x.data(), c, &geom);
        let mut out = vec![0.0; rows * o];
        gemm(rows, cols, o, &patches, cols as isize, 1, w.data(), o as isize, 1, &mut out);
        let rg = self.requires_grad() || weight.requires_grad();
        Ok(self.tape.push(
            Rc::new(Tensor::new(&[geom.oh, geom.ow, o], out)?),
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
            rg,
        ))
    }

    /// Convolution along axis 0 of a `(len, cin)` input with weight
    /// `(k, cin, cout)`.
    pub fn conv1d(&self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 3 {
            bail!(Shape, "conv1d: input {xs:?} with weight {ws:?}");
        }
        let y = self.reshape(&[xs[0], 1, xs[1]])?.conv2d(
            weight.reshape(&[ws[0], 1, ws[1], ws[2]])?,
            Conv2dOpts {
                stride: (stride, 1),
                pad: (pad, 0),
            },
        )?;
        let s = y.shape();
        y.reshape(&[s[0], s[2]])
    }

    /// Adjoint of [`Var::conv2d`]: input `(h, w, cin)`, weight
    /// `(cin, kh, kw, cout)`, output `(out_h, out_w, cout)`.
    pub fn conv_transpose2d(
        &self,
        weight: Var<'t>,
        opts: Conv2dOpts,
        out_size: (usize, usize),
    ) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[2] {
            bail!(Shape, "conv_transpose2d: input {xs:?} with weight {ws:?}");
        }
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ws[1], ws[2], ws[3]);
        let (oh, ow) = out_size;
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.pad;
        if sh == 0 || sw == 0 || oh + 2 * ph < kh || ow + 2 * pw < kw {
            bail!(Shape, "conv_transpose2d: output ({oh}, {ow}) too small");
        }
        let geom = ConvGeom {
            h: oh,
            w: ow,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh: (oh + 2 * ph - kh) / sh + 1,
            ow: (ow + 2 * pw - kw) / sw + 1,
        };
        if geom.oh != h || geom.ow != wd {
            bail!(
                Shape,
                "conv_transpose2d: output ({oh}, {ow}) maps back to ({}, {}), not ({h}, {wd})",
                geom.oh,
                geom.ow
            );
        }
        let rows = h * wd;
        let cols = kh * kw * cout;
        let mut patches = vec![0.0; rows * cols];
        gemm(rows, cin, cols, x.data(), cin as isize, 1, w.data(), cols as isize, 1, &mut patches);
        let mut out = vec![0.0; oh * ow * cout];
        col2im_add(&patches, cout, &geom, &mut out);
        let rg = self.requires_grad() || weight.requires_grad();
        Ok(self.tape.push(
            Rc::new(Tensor::new(&[oh, ow, cout], out)?),
            Op::ConvTranspose2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            bail!(Argument, "concat of nothing");
        };
        let base = first.shape();
        if axis >= base.len() {
            bail!(Shape, "concat axis {axis} out of range for {base:?}");
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total_axis = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                bail!(Shape, "concat: {s:?} does not match {base:?} off axis {axis}");
            }
            total_axis += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in &values {
                let width = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            Rc::new(Tensor::new(&shape, data)?),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || start + len > s[axis] {
            bail!(Shape, "slice [{start}, {}) on axis {axis} of {s:?}", start + len);
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let total = s[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = o * total + start * inner;
            data.extend_from_slice(&x.data()[b..b + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::new(&shape, data)?,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let t = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            bail!(Argument, "permutation {perm:?} invalid for rank {}", s.len());
        }
        let mut data = vec![0.0; x.len()];
        permute_apply(s, perm, |src, dst| data[dst] = x.data()[src]);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        Ok(self.unary(
            Tensor::new(&shape, data)?,
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let y = self.value().map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.unary(y, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    /// Parametric ReLU with one slope per entry of the last axis.
    pub fn prelu(&self, alpha: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let a = alpha.value();
        let c = a.len();
        if x.shape().last() != Some(&c) {
            bail!(Shape, "prelu: {} slopes for input {:?}", c, x.shape());
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { v * a.data()[i % c] })
            .collect();
        let rg = self.requires_grad() || alpha.requires_grad();
        Ok(self.tape.push(
            Rc::new(Tensor::new(x.shape(), data)?),
            Op::Prelu {
                input: self.id,
                alpha: alpha.id,
            },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies an optional elementwise
    /// gain and bias of that axis' size.
    pub fn layer_norm(&self, affine: Option<(Var<'t>, Var<'t>)>) -> Result<Var<'t>> {
        let x = self.value();
        let Some(&d) = x.shape().last() else {
            bail!(Shape, "layer_norm on a scalar");
        };
        let rows = x.len() / d.max(1);
        let (gamma, beta) = match affine {
            Some((g, b)) => {
                let (g, b) = (g.value(), b.value());
                if g.len() != d || b.len() != d {
                    bail!(Shape, "layer_norm: affine size {} / {} for dim {d}", g.len(), b.len());
                }
                (Some(g), Some(b))
            }
            None => (None, None),
        };
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = match (&gamma, &beta) {
                    (Some(g), Some(b)) => h * g.data()[j] + b.data()[j],
                    _ => h,
                };
            }
        }
        let rg = self.requires_grad() || affine.is_some_and(|(g, b)| g.requires_grad() || b.requires_grad());
        Ok(self.tape.push(
            Rc::new(Tensor::new(x.shape(), out)?),
            Op::LayerNorm {
                input: self.id,
                affine: affine.map(|(g, b)| (g.id, b.id)),
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(self.value().map(f64::abs), Op::Abs(self.id))
    }

    /// Base-10 logarithm with inputs floored at a tiny positive value; the
    /// gradient is zero below the floor.
    pub fn log10(&self) -> Var<'t> {
        self.unary(self.value().map(|v| v.max(LOG_FLOOR).log10()), Op::Log10(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            self.value().map(|v| v.clamp(lo, hi)),
            Op::Clamp {
                input: self.id,
                lo,
                hi,
            },
        )
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    /// Sums rows of a `(frames, n)` tensor into a signal, frame `t`
    /// starting at sample `t * hop`.
    pub fn overlap_add(&self, hop: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || hop == 0 {
            bail!(Shape, "overlap_add needs (frames, n) and hop > 0, got {s:?}");
        }
        let (frames, n) = (s[0], s[1]);
        let len = if frames == 0 { 0 } else { (frames - 1) * hop + n };
        let mut out = vec![0.0; len];
        for t in 0..frames {
            for k in 0..n {
                out[t * hop + k] += x.data()[t * n + k];
            }
        }
        Ok(self.unary(
            Tensor::new(&[len], out)?,
            Op::OverlapAdd { input: self.id, hop },
        ))
    }
}
