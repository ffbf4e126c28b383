//! Fused LSTM over a whole sequence, gate order input, forget, cell, output.

use std::rc::Rc;

use super::kernels::gemm;
use super::tape::{Node, Op};
use super::{Tensor, Var};
use crate::error::{bail, Result};

#[derive(Debug)]
pub(super) struct LstmNode {
    pub input: usize,
    pub w_ih: usize,
    pub w_hh: usize,
    pub bias: usize,
    pub reverse: bool,
    /// Post-activation gates, `(steps, batch, 4 * hidden)` in processing order.
    gates: Vec<f64>,
    /// Cell states `(steps + 1, batch, hidden)`, entry 0 the initial state.
    cells: Vec<f64>,
    /// Hidden states, laid out like `cells`.
    hiddens: Vec<f64>,
}

/// Recurrent state carried between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: vec![0.0; batch * hidden],
            c: vec![0.0; batch * hidden],
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct Forward {
    out: Vec<f64>,
    gates: Vec<f64>,
    cells: Vec<f64>,
    hiddens: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run(
    x: &[f64],
    steps: usize,
    batch: usize,
    inp: usize,
    hidden: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    reverse: bool,
    init: &LstmState,
) -> Forward {
    let g4 = 4 * hidden;
    let bh = batch * hidden;
    let mut pre = vec![0.0; steps * batch * g4];
    for row in pre.chunks_exact_mut(g4) {
        row.copy_from_slice(bias);
    }
    gemm(steps * batch, inp, g4, x, inp as isize, 1, w_ih, g4 as isize, 1, &mut pre);
    let mut gates = vec![0.0; steps * batch * g4];
    let mut cells = vec![0.0; (steps + 1) * bh];
    let mut hiddens = vec![0.0; (steps + 1) * bh];
    cells[..bh].copy_from_slice(&init.c);
    hiddens[..bh].copy_from_slice(&init.h);
    let mut out = vec![0.0; steps * bh];
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        let z = &mut gates[s * batch * g4..(s + 1) * batch * g4];
        z.copy_from_slice(&pre[t * batch * g4..(t + 1) * batch * g4]);
        let (prev, next) = hiddens.split_at_mut((s + 1) * bh);
        let h_prev = &prev[s * bh..];
        gemm(batch, hidden, g4, h_prev, hidden as isize, 1, w_hh, g4 as isize, 1, z);
        let (cprev, cnext) = cells.split_at_mut((s + 1) * bh);
        let c_prev = &cprev[s * bh..];
        let c_new = &mut cnext[..bh];
        let h_new = &mut next[..bh];
        for b in 0..batch {
            let zr = &mut z[b * g4..(b + 1) * g4];
            for j in 0..hidden {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[hidden + j]);
                let g = zr[2 * hidden + j].tanh();
                let o = sigmoid(zr[3 * hidden + j]);
                zr[j] = i;
                zr[hidden + j] = f;
                zr[2 * hidden + j] = g;
                zr[3 * hidden + j] = o;
                let c = f * c_prev[b * hidden + j] + i * g;
                c_new[b * hidden + j] = c;
                h_new[b * hidden + j] = o * c.tanh();
            }
        }
        out[t * bh..(t + 1) * bh].copy_from_slice(h_new);
    }
    Forward {
        out,
        gates,
        cells,
        hiddens,
    }
}

fn check(xs: &[usize], wi: &[usize], wh: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if xs.len() != 3 || wi.len() != 2 || wh.len() != 2 || wi[0] != xs[2] {
        bail!(Shape, "lstm: input {xs:?}, input weights {wi:?}");
    }
    let hidden = wh[0];
    if wi[1] != 4 * hidden || wh[1] != 4 * hidden || b != [4 * hidden] {
        bail!(Shape, "lstm: weights {wi:?}/{wh:?}/{b:?} for hidden {hidden}");
    }
    Ok((xs[0], xs[1], xs[2], hidden))
}

impl<'t> Var<'t> {
    /// Runs an LSTM over axis 0 of a `(steps, batch, in)` input with zero
    /// initial state, returning `(steps, batch, hidden)`. With `reverse` the
    /// sequence is consumed back to front and outputs stay time-aligned.
    ///
    /// Weights: `w_ih (in, 4h)`, `w_hh (h, 4h)`, `bias (4h)`.
    pub fn lstm(&self, w_ih: Var<'t>, w_hh: Var<'t>, bias: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let (x, wi, wh, b) = (self.value(), w_ih.value(), w_hh.value(), bias.value());
        let (steps, batch, inp, hidden) = check(x.shape(), wi.shape(), wh.shape(), b.shape())?;
        let fw = run(
            x.data(),
            steps,
            batch,
            inp,
            hidden,
            wi.data(),
            wh.data(),
            b.data(),
            reverse,
            &LstmState::zeros(batch, hidden),
        );
        let rg = [*self, w_ih, w_hh, bias].iter().any(|v| v.requires_grad());
        let node = LstmNode {
            input: self.id,
            w_ih: w_ih.id,
            w_hh: w_hh.id,
            bias: bias.id,
            reverse,
            gates: fw.gates,
            cells: fw.cells,
            hiddens: fw.hiddens,
        };
        Ok(self.tape.push(
            Rc::new(Tensor::new(&[steps, batch, hidden], fw.out)?),
            Op::Lstm(Box::new(node)),
            rg,
        ))
    }
}

/// One LSTM step built from elementwise primitives: `x (batch, in)`,
/// `h_prev`/`c_prev (batch, hidden)`; returns `(h, c)`.
pub fn lstm_cell<'t>(
    x: Var<'t>,
    h_prev: Var<'t>,
    c_prev: Var<'t>,
    w_ih: Var<'t>,
    w_hh: Var<'t>,
    bias: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let hidden = h_prev.shape().last().copied().unwrap_or(0);
    if w_hh.shape() != [hidden, 4 * hidden] || c_prev.shape() != h_prev.shape() {
        bail!(Shape, "lstm_cell: state {:?}/{:?}, recurrent weights {:?}", h_prev.shape(), c_prev.shape(), w_hh.shape());
    }
    let z = x.matmul(w_ih)?.add(h_prev.matmul(w_hh)?)?.add(bias)?;
    let i = z.slice(1, 0, hidden)?.sigmoid();
    let f = z.slice(1, hidden, hidden)?.sigmoid();
    let g = z.slice(1, 2 * hidden, hidden)?.tanh();
    let o = z.slice(1, 3 * hidden, hidden)?.sigmoid();
    let c = f.mul(c_prev)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok((h, c))
}

/// Gradient-free forward pass continuing from `state`, which is updated in place.
pub fn lstm_step(
    x: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    bias: &Tensor,
    state: &mut LstmState,
) -> Result<Tensor> {
    let (steps, batch, inp, hidden) = check(x.shape(), w_ih.shape(), w_hh.shape(), bias.shape())?;
    if state.h.len() != batch * hidden || state.c.len() != batch * hidden {
        bail!(Shape, "lstm state holds {} values, need {}", state.h.len(), batch * hidden);
    }
    let fw = run(
        x.data(),
        steps,
        batch,
        inp,
        hidden,
        w_ih.data(),
        w_hh.data(),
        bias.data(),
        false,
        state,
    );
    let bh = batch * hidden;
    state.h.copy_from_slice(&fw.hiddens[steps * bh..]);
    state.c.copy_from_slice(&fw.cells[steps * bh..]);
    Tensor::new(&[steps, batch, hidden], fw.out)
}

pub(super) fn pullback(nodes: &[Node], n: &LstmNode, g: &[f64], grads: &mut [Option<Tensor>]) {
    let x = nodes[n.input].value.clone();
    let w_ih = nodes[n.w_ih].value.clone();
    let w_hh = nodes[n.w_hh].value.clone();
    let (steps, batch, inp) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hidden = w_hh.shape()[0];
    let g4 = 4 * hidden;
    let bh = batch * hidden;

    // Pre-activation gradients for every step, in original time order.
    let mut dz_all = vec![0.0; steps * batch * g4];
    let mut dh_next = vec![0.0; bh];
    let mut dc_next = vec![0.0; bh];
    for s in (0..steps).rev() {
        let t = if n.reverse { steps - 1 - s } else { s };
        let gates = &n.gates[s * batch * g4..(s + 1) * batch * g4];
        let c_prev = &n.cells[s * bh..(s + 1) * bh];
        let c_cur = &n.cells[(s + 1) * bh..(s + 2) * bh];
        let dz = &mut dz_all[t * batch * g4..(t + 1) * batch * g4];
        for b in 0..batch {
            let gr = &gates[b * g4..(b + 1) * g4];
            for j in 0..hidden {
                let k = b * hidden + j;
                let (i, f, gg, o) = (gr[j], gr[hidden + j], gr[2 * hidden + j], gr[3 * hidden + j]);
                let dh = g[t * bh + k] + dh_next[k];
                let tc = c_cur[k].tanh();
                let d_o = dh * tc;
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                let di = dc * gg;
                let dg = dc * i;
                let df = dc * c_prev[k];
                dc_next[k] = dc * f;
                let zr = &mut dz[b * g4..(b + 1) * g4];
                zr[j] = di * i * (1.0 - i);
                zr[hidden + j] = df * f * (1.0 - f);
                zr[2 * hidden + j] = dg * (1.0 - gg * gg);
                zr[3 * hidden + j] = d_o * o * (1.0 - o);
            }
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        gemm(batch, g4, hidden, dz, g4 as isize, 1, w_hh.data(), 1, g4 as isize, &mut dh_next);
    }

    let rows = steps * batch;
    if nodes[n.input].requires_grad {
        let dx = slot(nodes, grads, n.input);
        gemm(rows, g4, inp, &dz_all, g4 as isize, 1, w_ih.data(), 1, g4 as isize, dx);
    }
    if nodes[n.w_ih].requires_grad {
        let dw = slot(nodes, grads, n.w_ih);
        gemm(inp, rows, g4, x.data(), 1, inp as isize, &dz_all, g4 as isize, 1, dw);
    }
    if nodes[n.w_hh].requires_grad {
        // h_prev for original step t is the hidden state preceding it in processing order.
        let mut h_prev = vec![0.0; rows * hidden];
        for s in 0..steps {
            let t = if n.reverse { steps - 1 - s } else { s };
            h_prev[t * bh..(t + 1) * bh].copy_from_slice(&n.hiddens[s * bh..(s + 1) * bh]);
        }
        let dw = slot(nodes, grads, n.w_hh);
        gemm(hidden, rows, g4, &h_prev, 1, hidden as isize, &dz_all, g4 as isize, 1, dw);
    }
    if nodes[n.bias].requires_grad {
        let db = slot(nodes, grads, n.bias);
        for row in dz_all.chunks_exact(g4) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], id: usize) -> &'a mut [f64] {
    grads[id]
        .get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()))
        .data_mut()
}
