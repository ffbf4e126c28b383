use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{col2im_add, gemm, im2col, ConvGeom};
use super::Tensor;
use crate::error::{bail, Result};

pub(super) const LN_EPS: f64 = 1e-5;
pub(super) const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug)]
pub(super) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Conv2d { input: usize, weight: usize, geom: ConvGeom },
    ConvTranspose2d { input: usize, weight: usize, geom: ConvGeom },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
    Permute { input: usize, perm: Vec<usize> },
    Sigmoid(usize),
    Tanh(usize),
    Prelu { input: usize, alpha: usize },
    LayerNorm { input: usize, affine: Option<(usize, usize)>, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(usize),
    Mean(usize),
    Abs(usize),
    Log10(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    OverlapAdd { input: usize, hop: usize },
    Lstm(Box<super::lstm::LstmNode>),
}

pub(super) struct Node {
    pub value: Rc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// A tape built with [`Tape::no_grad`] still computes every value but never
/// records pullbacks.
pub struct Tape {
    pub(super) nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(super) tape: &'t Tape,
    pub(super) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        self.push(value.into(), Op::Leaf, self.grad_enabled)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Rc<Tensor>>) -> Var<'_> {
        self.push(value.into(), Op::Leaf, false)
    }

    pub(super) fn push(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad && self.grad_enabled { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(super) fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(super) fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            bail!(
                Argument,
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            );
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            pullback(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Adds into the gradient slot of `id`, allocating zeros on first use.
fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    Some(slot.data_mut())
}

/// Accumulates `g` (shaped like the broadcast output) into operand `id`,
/// summing over repeated leading blocks when the operand was broadcast.
fn acc_broadcast(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: impl Iterator<Item = f64>) {
    let n = nodes[id].value.len();
    if let Some(dst) = acc(nodes, grads, id) {
        for (i, v) in g.enumerate() {
            dst[i % n] += v;
        }
    }
}

fn pullback(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Lstm(n) => super::lstm::pullback(nodes, n, gd, grads),
        Op::Add(a, b) => {
            acc_broadcast(nodes, grads, *a, gd.iter().copied());
            acc_broadcast(nodes, grads, *b, gd.iter().copied());
        }
        Op::Sub(a, b) => {
            acc_broadcast(nodes, grads, *a, gd.iter().copied());
            acc_broadcast(nodes, grads, *b, gd.iter().map(|v| -v));
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let (na, nb) = (av.len(), bv.len());
            acc_broadcast(nodes, grads, *a, gd.iter().enumerate().map(|(i, v)| v * bv[i % nb]));
            acc_broadcast(nodes, grads, *b, gd.iter().enumerate().map(|(i, v)| v * av[i % na]));
        }
        Op::Div(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let (na, nb) = (av.len(), bv.len());
            acc_broadcast(nodes, grads, *a, gd.iter().enumerate().map(|(i, v)| v / bv[i % nb]));
            acc_broadcast(
                nodes,
                grads,
                *b,
                gd.iter().enumerate().map(|(i, v)| {
                    let d = bv[i % nb];
                    -v * av[i % na] / (d * d)
                }),
            );
        }
        Op::Scale(a, k) => {
            if let Some(dst) = acc(nodes, grads, *a) {
                for (d, v) in dst.iter_mut().zip(gd) {
                    *d += k * v;
                }
            }
        }
        Op::Offset(a) => {
            if let Some(dst) = acc(nodes, grads, *a) {
                for (d, v) in dst.iter_mut().zip(gd) {
                    *d += v;
                }
            }
        }
        Op::MatMul(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(da) = acc(nodes, grads, *a) {
                // dA = G (m x n) * B^T (n x k)
                gemm(m, n, k, gd, n as isize, 1, bv.data(), 1, n as isize, da);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                // dB = A^T (k x m) * G (m x n)
                gemm(k, m, n, av.data(), 1, k as isize, gd, n as isize, 1, db);
            }
        }
        Op::Conv2d { input, weight, geom } => {
            let x = nodes[*input].value.clone();
            let w = nodes[*weight].value.clone();
            let c = x.shape()[2];
            let o = w.shape()[3];
            let rows = geom.oh * geom.ow;
            let cols = geom.kh * geom.kw * c;
            if nodes[*weight].requires_grad {
                let patches = im2col(x.data(), c, geom);
                let dw = acc(nodes, grads, *weight).expect("checked");
                gemm(cols, rows, o, &patches, 1, cols as isize, gd, o as isize, 1, dw);
            }
            if nodes[*input].requires_grad {
                let mut dpatches = vec![0.0; rows * cols];
                gemm(rows, o, cols, gd, o as isize, 1, w.data(), 1, o as isize, &mut dpatches);
                let dx = acc(nodes, grads, *input).expect("checked");
                col2im_add(&dpatches, c, geom, dx);
            }
        }
        Op::ConvTranspose2d { input, weight, geom } => {
            let x = nodes[*input].value.clone();
            let w = nodes[*weight].value.clone();
            let cin = x.shape()[2];
            let cout = out.shape()[2];
            let rows = geom.oh * geom.ow;
            let cols = geom.kh * geom.kw * cout;
            let dcols = im2col(gd, cout, geom);
            if let Some(dw) = acc(nodes, grads, *weight) {
                gemm(cin, rows, cols, x.data(), 1, cin as isize, &dcols, cols as isize, 1, dw);
            }
            if let Some(dx) = acc(nodes, grads, *input) {
                gemm(rows, cols, cin, &dcols, cols as isize, 1, w.data(), 1, cols as isize, dx);
            }
        }
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.shape()[*axis] * inner;
                if let Some(dst) = acc(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &gd[o * total + offset..o * total + offset + width];
                        for (d, s) in dst[o * width..(o + 1) * width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += width;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[*input].value.shape().to_vec();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let total = in_shape[*axis] * inner;
            let width = out.shape()[*axis] * inner;
            if let Some(dst) = acc(nodes, grads, *input) {
                for o in 0..outer {
                    let base = o * total + start * inner;
                    for (d, s) in dst[base..base + width].iter_mut().zip(&gd[o * width..(o + 1) * width]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(dst) = acc(nodes, grads, *a) {
                for (d, v) in dst.iter_mut().zip(gd) {
                    *d += v;
                }
            }
        }
        Op::Permute { input, perm } => {
            let in_shape = nodes[*input].value.shape().to_vec();
            if let Some(dst) = acc(nodes, grads, *input) {
                permute_apply(&in_shape, perm, |src, dst_i| dst[src] += gd[dst_i]);
            }
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            if let Some(dst) = acc(nodes, grads, *a) {
                for i in 0..dst.len() {
                    dst[i] += gd[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Tanh(a) => {
            let y = out.data();
            if let Some(dst) = acc(nodes, grads, *a) {
                for i in 0..dst.len() {
                    dst[i] += gd[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Prelu { input, alpha } => {
            let x = nodes[*input].value.clone();
            let al = nodes[*alpha].value.clone();
            let c = al.len();
            let xd = x.data();
            if let Some(dx) = acc(nodes, grads, *input) {
                for i in 0..dx.len() {
                    dx[i] += if xd[i] >= 0.0 { gd[i] } else { gd[i] * al.data()[i % c] };
                }
            }
            if let Some(da) = acc(nodes, grads, *alpha) {
                for i in 0..xd.len() {
                    if xd[i] < 0.0 {
                        da[i % c] += gd[i] * xd[i];
                    }
                }
            }
        }
        Op::LayerNorm { input, affine, xhat, inv_std } => {
            let d = *out.shape().last().expect("layer norm input has a last dim");
            let rows = xhat.len() / d;
            let gamma = affine.map(|(gm, _)| nodes[gm].value.clone());
            if let Some((gm, bt)) = affine {
                if let Some(dg) = acc(nodes, grads, *gm) {
                    for i in 0..xhat.len() {
                        dg[i % d] += gd[i] * xhat[i];
                    }
                }
                if let Some(db) = acc(nodes, grads, *bt) {
                    for i in 0..gd.len() {
                        db[i % d] += gd[i];
                    }
                }
            }
            if let Some(dx) = acc(nodes, grads, *input) {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let gj = gd[r * d + j] * gamma.as_ref().map_or(1.0, |gm| gm.data()[j]);
                        dxhat[j] = gj;
                        s1 += gj;
                        s2 += gj * xhat[r * d + j];
                    }
                    let k = inv_std[r] / d as f64;
                    for j in 0..d {
                        dx[r * d + j] += k * (d as f64 * dxhat[j] - s1 - xhat[r * d + j] * s2);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(dst) = acc(nodes, grads, *a) {
                for d in dst.iter_mut() {
                    *d += gd[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(dst) = acc(nodes, grads, *a) {
                let k = gd[0] / dst.len() as f64;
                for d in dst.iter_mut() {
                    *d += k;
                }
            }
        }
        Op::Abs(a) => {
            let x = nodes[*a].value.clone();
            if let Some(dst) = acc(nodes, grads, *a) {
                for (i, d) in dst.iter_mut().enumerate() {
                    let s = x.data()[i];
                    *d += if s > 0.0 {
                        gd[i]
                    } else if s < 0.0 {
                        -gd[i]
                    } else {
                        0.0
                    };
                }
            }
        }
        Op::Log10(a) => {
            let x = nodes[*a].value.clone();
            if let Some(dst) = acc(nodes, grads, *a) {
                for (i, d) in dst.iter_mut().enumerate() {
                    let s = x.data()[i];
                    if s > LOG_FLOOR {
                        *d += gd[i] / (s * std::f64::consts::LN_10);
                    }
                }
            }
        }
        Op::Clamp { input, lo, hi } => {
            let x = nodes[*input].value.clone();
            if let Some(dst) = acc(nodes, grads, *input) {
                for (i, d) in dst.iter_mut().enumerate() {
                    let s = x.data()[i];
                    if s >= *lo && s <= *hi {
                        *d += gd[i];
                    }
                }
            }
        }
        Op::OverlapAdd { input, hop } => {
            let n = nodes[*input].value.shape()[1];
            if let Some(dst) = acc(nodes, grads, *input) {
                let frames = dst.len() / n;
                for t in 0..frames {
                    for k in 0..n {
                        dst[t * n + k] += gd[t * hop + k];
                    }
                }
            }
        }
    }
}

/// Calls `f(source_index, dest_index)` for every element of a permutation of
/// a tensor shaped `shape` into axis order `perm`.
pub(super) fn permute_apply(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = shape.len();
    let mut src_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for dst in 0..total {
        f(src, dst);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
