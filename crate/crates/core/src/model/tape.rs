//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every matrix operation of one forward pass together
//! with whatever it needs for the backward sweep (normalized activations,
//! attention probabilities). [`Tape::backward`] walks the records in reverse
//! and accumulates vector-Jacobian products into the parameter leaves.
//!
//! Operations are coarse (a whole layer norm or a whole multi-head attention
//! is one node), which keeps the tape short and the inner loops in GEMM.

use std::collections::HashMap;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<f64>,
    },
    Assemble {
        tokens: Var,
        cls: Var,
        pos: Var,
    },
    DropFirst {
        x: Var,
        seq: usize,
    },
    WeightedMae {
        pred: Var,
        target: Matrix,
        weights: Vec<f64>,
        rows: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// Leaf bound to a named parameter. Requesting the same name twice
    /// returns the same leaf so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        let (r, c) = t.matrix_shape();
        let v = self.push(Matrix::from_vec(r, c, t.data.clone()), Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Like [`Tape::param`] but the leaf is treated as a constant.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        let (r, c) = t.matrix_shape();
        let v = self.input(Matrix::from_vec(r, c, t.data.clone()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ma.cols, mb.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(ma.rows, mb.cols);
        gemm(ma.rows, ma.cols, mb.cols, 1.0, &ma.data, false, &mb.data, false, 0.0, &mut out.data);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x + bias` with `bias` (1 x cols) broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mx = &self.nodes[x.0].value;
        let b = &self.nodes[bias.0].value;
        assert_eq!(b.data.len(), mx.cols, "bias width mismatch");
        let mut out = mx.clone();
        for row in out.data.chunks_exact_mut(mx.cols) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        let ng = self.needs(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ma.shape(), mb.shape(), "add shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x + y).collect();
        let out = Matrix::from_vec(ma.rows, ma.cols, data);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let m = &self.nodes[x.0].value;
        let out = Matrix::from_vec(m.rows, m.cols, m.data.iter().map(|v| v * c).collect());
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let m = &self.nodes[x.0].value;
        let out = Matrix::from_vec(m.rows, m.cols, m.data.iter().map(|v| v.max(0.0)).collect());
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let m = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gain.0].value.data, &self.nodes[bias.0].value.data);
        let cols = m.cols;
        let mut xhat = vec![0.0; m.data.len()];
        let mut rstd = vec![0.0; m.rows];
        let mut out = Matrix::zeros(m.rows, cols);
        for r in 0..m.rows {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * cols..(r + 1) * cols];
            let o = &mut out.data[r * cols..(r + 1) * cols];
            for j in 0..cols {
                xh[j] = (row[j] - mean) * rs;
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// Scaled dot-product attention over consecutive blocks of `seq` rows,
    /// with `heads` column groups. No masking: every position sees every
    /// position of its own block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Var {
        let (mq, mk, mv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        assert_eq!(mq.shape(), mk.shape());
        assert_eq!(mq.shape(), mv.shape());
        assert_eq!(mq.rows % seq, 0, "rows not a multiple of sequence length");
        assert_eq!(mq.cols % heads, 0, "width not divisible by heads");
        let d = mq.cols;
        let dh = d / heads;
        let batch = mq.rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = Matrix::zeros(mq.rows, d);
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &mq.data[(b * seq + i) * d + h * dh..][..dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &mk.data[(b * seq + j) * d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        *pj = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= z;
                    }
                    let oi = &mut out.data[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &mv.data[(b * seq + j) * d + h * dh..][..dh];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, seq, probs }, ng)
    }

    /// Prepend `cls` to every block of token rows and add positional
    /// encodings: row `(b, 0)` is `cls + pos[0]`, row `(b, t+1)` is
    /// `tokens(b, t) + pos[t+1]`.
    pub fn assemble(&mut self, tokens: Var, cls: Var, pos: Var) -> Var {
        let (mt, mc, mp) = (&self.nodes[tokens.0].value, &self.nodes[cls.0].value, &self.nodes[pos.0].value);
        let d = mt.cols;
        let seq = mp.rows;
        assert_eq!(mc.data.len(), d);
        assert_eq!(mp.cols, d);
        let per = seq - 1;
        assert_eq!(mt.rows % per, 0, "token rows not a multiple of sequence length");
        let batch = mt.rows / per;
        let mut out = Matrix::zeros(batch * seq, d);
        for b in 0..batch {
            for s in 0..seq {
                let src = if s == 0 { &mc.data[..] } else { mt.row(b * per + s - 1) };
                let o = out.row_mut(b * seq + s);
                for ((ov, sv), pv) in o.iter_mut().zip(src).zip(mp.row(s)) {
                    *ov = sv + pv;
                }
            }
        }
        let ng = self.needs(&[tokens, cls, pos]);
        self.push(out, Op::Assemble { tokens, cls, pos }, ng)
    }

    /// Drop the first row of every block of `seq` rows.
    pub fn drop_first(&mut self, x: Var, seq: usize) -> Var {
        let m = &self.nodes[x.0].value;
        assert_eq!(m.rows % seq, 0);
        let batch = m.rows / seq;
        let mut out = Matrix::zeros(batch * (seq - 1), m.cols);
        for b in 0..batch {
            for s in 1..seq {
                out.row_mut(b * (seq - 1) + s - 1).copy_from_slice(m.row(b * seq + s));
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::DropFirst { x, seq }, ng)
    }

    /// Mean over all elements of the listed rows of `|w_j (target - pred)|`.
    pub fn weighted_mae(&mut self, pred: Var, target: Matrix, weights: Vec<f64>, rows: Vec<usize>) -> Result<Var> {
        let mp = &self.nodes[pred.0].value;
        if rows.is_empty() {
            return Err(Error::Validation("loss over an empty mask".into()));
        }
        if mp.shape() != target.shape() || weights.len() != mp.cols {
            return Err(Error::Validation("loss operand shapes disagree".into()));
        }
        if let Some(r) = rows.iter().find(|&&r| r >= mp.rows) {
            return Err(Error::Validation(format!("masked row {r} out of range")));
        }
        let mut total = 0.0;
        for &r in &rows {
            total += target
                .row(r)
                .iter()
                .zip(mp.row(r))
                .zip(&weights)
                .map(|((y, yh), w)| (w * (y - yh)).abs())
                .sum::<f64>();
        }
        let loss = total / (rows.len() * mp.cols) as f64;
        let ng = self.needs(&[pred]);
        Ok(self.push(Matrix::from_vec(1, 1, vec![loss]), Op::WeightedMae { pred, target, weights, rows }, ng))
    }

    /// Mean squared error of an `n x 1` prediction.
    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let mp = &self.nodes[pred.0].value;
        if mp.data.len() != target.len() || target.is_empty() {
            return Err(Error::Validation("mse operand lengths disagree".into()));
        }
        let loss = mp.data.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / target.len() as f64;
        let ng = self.needs(&[pred]);
        Ok(self.push(Matrix::from_vec(1, 1, vec![loss]), Op::Mse { pred, target }, ng))
    }

    /// Reverse sweep from a scalar node. Returns a gradient store with the
    /// same layout as `store`; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<ParamStore> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward pass was recorded".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::State(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        if !lv.data[0].is_finite() {
            return Err(Error::numeric("loss"));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = store.zeros_like();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    if let Some(t) = out.get_mut(name) {
                        for (a, b) in t.data.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ma.rows, ma.cols, mb.cols);
                    if self.nodes[a.0].needs_grad {
                        let ga = self.grad_slot(&mut grads, *a);
                        gemm(m, n, k, 1.0, &g, false, &mb.data, true, 1.0, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.grad_slot(&mut grads, *b);
                        gemm(k, m, n, 1.0, &ma.data, true, &g, false, 1.0, gb);
                    }
                }
                Op::AddRow(x, bias) => {
                    let cols = node.value.cols;
                    if self.nodes[bias.0].needs_grad {
                        let gb = self.grad_slot(&mut grads, *bias);
                        for row in g.chunks_exact(cols) {
                            for (a, b) in gb.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::Scale(x, c) => {
                    if self.nodes[x.0].needs_grad {
                        let gx = self.grad_slot(&mut grads, *x);
                        for (a, b) in gx.iter_mut().zip(&g) {
                            *a += c * b;
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.nodes[x.0].needs_grad {
                        let xin = &self.nodes[x.0].value.data;
                        let gx = self.grad_slot(&mut grads, *x);
                        for ((a, b), v) in gx.iter_mut().zip(&g).zip(xin) {
                            if *v > 0.0 {
                                *a += b;
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let cols = node.value.cols;
                    let gv = self.nodes[gain.0].value.data.clone();
                    if self.nodes[gain.0].needs_grad {
                        let gg = self.grad_slot(&mut grads, *gain);
                        for (row, xh) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                            for j in 0..cols {
                                gg[j] += row[j] * xh[j];
                            }
                        }
                    }
                    if self.nodes[bias.0].needs_grad {
                        let gb = self.grad_slot(&mut grads, *bias);
                        for row in g.chunks_exact(cols) {
                            for (a, b) in gb.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let gx = self.grad_slot(&mut grads, *x);
                        let mut dxh = vec![0.0; cols];
                        for (r, ((row, xh), gxr)) in g
                            .chunks_exact(cols)
                            .zip(xhat.chunks_exact(cols))
                            .zip(gx.chunks_exact_mut(cols))
                            .enumerate()
                        {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..cols {
                                dxh[j] = row[j] * gv[j];
                                m1 += dxh[j];
                                m2 += dxh[j] * xh[j];
                            }
                            m1 /= cols as f64;
                            m2 /= cols as f64;
                            for j in 0..cols {
                                gxr[j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                            }
                        }
                    }
                }
                Op::Attention { q, k, v, heads, seq, probs } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, *seq, probs);
                }
                Op::Assemble { tokens, cls, pos } => {
                    let d = node.value.cols;
                    let seq = self.nodes[pos.0].value.rows;
                    let batch = node.value.rows / seq;
                    if self.nodes[cls.0].needs_grad {
                        let gc = self.grad_slot(&mut grads, *cls);
                        for b in 0..batch {
                            for (a, v) in gc.iter_mut().zip(&g[b * seq * d..][..d]) {
                                *a += v;
                            }
                        }
                    }
                    if self.nodes[pos.0].needs_grad {
                        let gp = self.grad_slot(&mut grads, *pos);
                        for b in 0..batch {
                            for (a, v) in gp.iter_mut().zip(&g[b * seq * d..][..seq * d]) {
                                *a += v;
                            }
                        }
                    }
                    if self.nodes[tokens.0].needs_grad {
                        let gt = self.grad_slot(&mut grads, *tokens);
                        let per = seq - 1;
                        for b in 0..batch {
                            let src = &g[(b * seq + 1) * d..][..per * d];
                            for (a, v) in gt[b * per * d..][..per * d].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::DropFirst { x, seq } => {
                    if self.nodes[x.0].needs_grad {
                        let d = node.value.cols;
                        let per = seq - 1;
                        let batch = node.value.rows / per;
                        let gx = self.grad_slot(&mut grads, *x);
                        for b in 0..batch {
                            let dst = &mut gx[(b * seq + 1) * d..][..per * d];
                            for (a, v) in dst.iter_mut().zip(&g[b * per * d..][..per * d]) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::WeightedMae { pred, target, weights, rows } => {
                    if self.nodes[pred.0].needs_grad {
                        let mp = &self.nodes[pred.0].value;
                        let cols = mp.cols;
                        let scale = g[0] / (rows.len() * cols) as f64;
                        let gp = self.grad_slot(&mut grads, *pred);
                        for &r in rows {
                            for j in 0..cols {
                                let resid = target.data[r * cols + j] - mp.data[r * cols + j];
                                let s = if resid > 0.0 {
                                    -1.0
                                } else if resid < 0.0 {
                                    1.0
                                } else {
                                    0.0
                                };
                                gp[r * cols + j] += scale * weights[j].abs() * s;
                            }
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    if self.nodes[pred.0].needs_grad {
                        let mp = &self.nodes[pred.0].value;
                        let scale = 2.0 * g[0] / target.len() as f64;
                        let gp = self.grad_slot(&mut grads, *pred);
                        for ((a, p), t) in gp.iter_mut().zip(&mp.data).zip(target) {
                            *a += scale * (p - t);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.data.len()])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = self.grad_slot(grads, v);
        for (a, b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: &[f64],
    ) {
        let (mq, mk, mv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = mq.cols;
        let dh = d / heads;
        let batch = mq.rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; mq.data.len()];
        let mut gk = vec![0.0; mk.data.len()];
        let mut gv = vec![0.0; mv.data.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let go = &g[(b * seq + i) * d + h * dh..][..dh];
                    let prow = &p[i * seq..(i + 1) * seq];
                    // dV_j += p_ij * dO_i ; dP_ij = dO_i . V_j
                    let mut dot = 0.0;
                    for j in 0..seq {
                        let off = (b * seq + j) * d + h * dh;
                        let vj = &mv.data[off..off + dh];
                        let gvj = &mut gv[off..off + dh];
                        let mut s = 0.0;
                        for c in 0..dh {
                            gvj[c] += prow[j] * go[c];
                            s += go[c] * vj[c];
                        }
                        dp[j] = s;
                        dot += s * prow[j];
                    }
                    // Softmax backward, then scores = scale * Q_i . K_j.
                    let qoff = (b * seq + i) * d + h * dh;
                    for j in 0..seq {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (b * seq + j) * d + h * dh;
                        for c in 0..dh {
                            gq[qoff + c] += ds * mk.data[koff + c];
                            gk[koff + c] += ds * mq.data[qoff + c];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, &gq);
        self.accumulate(grads, k, &gk);
        self.accumulate(grads, v, &gv);
    }
}
