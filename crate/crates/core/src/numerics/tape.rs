//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves borrow their
//! values, so model parameters are never copied onto the tape. `backward`
//! walks the records in reverse and only touches nodes that require a gradient.
//!
//! The operator set is exactly what the toy transformer needs: products,
//! elementwise arithmetic, SiLU, RMS normalization, embedding lookup, fused
//! causal multi-head attention, row softmax, masked (top-K) softmax, row
//! gather/scatter, and the scalar losses.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::functions::{log_softmax_at, softmax_in_place};
use crate::numerics::Matrix;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    Softmax(Var),
    MaskedSoftmax {
        logits: Var,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherEntries {
        x: Var,
        col: usize,
        rows: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        scale: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    WeightedSum {
        x: Var,
        coeff: Matrix,
    },
    SumSquares(Var),
    LinComb(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the node does not require a gradient or received none.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads[var.0].take()
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(g) => g.add_in_place(&delta),
        None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf, typically a model parameter.
    pub fn leaf(&mut self, value: &'a Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf, typically an input or a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn owned_leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_in_place(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_raw(va.rows(), va.cols(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| z * sigmoid(z)).collect();
        let out = Matrix::from_raw(v.rows(), v.cols(), data);
        self.push(out, Op::Silu(x), &[x])
    }

    /// Row-wise RMS normalization with a learned `1 x cols` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.shape() != (1, xv.cols()) {
            return Err(Error::Shape(format!(
                "rms_norm gain {:?} for input {:?}",
                gv.shape(),
                xv.shape()
            )));
        }
        let cols = xv.cols();
        let mut out = Matrix::zeros(xv.rows(), cols);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|z| z * z).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, z), g) in out.row_mut(r).iter_mut().zip(row).zip(gv.data()) {
                *o = z * inv * g;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidInput(format!(
                "embedding id {bad} out of range {}",
                t.rows()
            )));
        }
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::Embed { table, ids }, &[table]))
    }

    /// Causal multi-head attention over consecutive blocks of `seq_len` rows.
    ///
    /// `q`, `k`, `v` are already projected; heads split the columns evenly.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        self.check_same_shape(q, k, "attention q/k")?;
        self.check_same_shape(q, v, "attention q/v")?;
        let (rows, width) = self.value(q).shape();
        if heads == 0 || width % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "attention rows {rows} width {width} heads {heads} seq_len {seq_len}"
            )));
        }
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n_seq = rows / seq_len;
        let mut out = Matrix::zeros(rows, width);
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut scores = vec![0.0; seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let c0 = h * d;
                let pbase = (s * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &qv.row(base + i)[c0..c0 + d];
                    for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kv.row(base + j)[c0..c0 + d];
                        *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let prow = &mut probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                    prow[..=i].copy_from_slice(&scores[..=i]);
                    let orow = &mut out.row_mut(base + i)[c0..c0 + d];
                    for (j, &p) in prow.iter().enumerate().take(i + 1) {
                        let vj = &vv.row(base + j)[c0..c0 + d];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn softmax_rows(&mut self, logits: Var) -> Var {
        let mut out = self.value(logits).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(logits), &[logits])
    }

    /// Softmax restricted to the selected entries of each row; others are 0.
    ///
    /// `selected[r]` lists the kept column indices of row `r`.
    pub fn masked_softmax(&mut self, logits: Var, selected: &[Vec<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if selected.len() != lv.rows() {
            return Err(Error::Shape("masked_softmax selection rows".into()));
        }
        let mut out = Matrix::zeros(lv.rows(), lv.cols());
        let mut buf = Vec::new();
        for (r, cols) in selected.iter().enumerate() {
            if cols.is_empty() || cols.iter().any(|&c| c >= lv.cols()) {
                return Err(Error::InvalidInput(format!("bad selection for row {r}")));
            }
            buf.clear();
            buf.extend(cols.iter().map(|&c| lv.get(r, c)));
            softmax_in_place(&mut buf);
            for (&c, &p) in cols.iter().zip(&buf) {
                out.set(r, c, p);
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax { logits }, &[logits]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::GatherRows { x, rows }, &[x])
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero matrix with `total` rows.
    pub fn scatter_rows(&mut self, x: Var, rows: Vec<usize>, total: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(total, xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            for (o, v) in out.row_mut(r).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterRows { x, rows }, &[x])
    }

    /// Column vector of `x[rows[i], col]`.
    pub fn gather_entries(&mut self, x: Var, col: usize, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let data = rows.iter().map(|&r| xv.get(r, col)).collect();
        let out = Matrix::from_raw(rows.len(), 1, data);
        self.push(out, Op::GatherEntries { x, col, rows }, &[x])
    }

    /// Multiplies row `i` of `x` by `scale[i, 0]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        if sv.shape() != (xv.rows(), 1) {
            return Err(Error::Shape("scale_rows expects a column vector".into()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let s = sv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::ScaleRows { x, scale }, &[x, scale]))
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])` as a 1x1 value.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || weights.len() != lv.rows() {
            return Err(Error::Shape("cross_entropy target/weight rows".into()));
        }
        if targets.iter().any(|&t| t >= lv.cols()) {
            return Err(Error::InvalidInput("cross_entropy target out of range".into()));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for r in 0..lv.rows() {
            if weights[r] != 0.0 {
                total -= weights[r] * log_softmax_at(lv.row(r), targets[r]);
            }
            softmax_in_place(probs.row_mut(r));
        }
        Ok(self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            &[logits],
        ))
    }

    /// `Σ coeff ⊙ x` as a 1x1 value; `coeff` is treated as a constant.
    pub fn weighted_sum(&mut self, x: Var, coeff: Matrix) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != coeff.shape() {
            return Err(Error::Shape("weighted_sum coefficient shape".into()));
        }
        let total = xv.data().iter().zip(coeff.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Matrix::scalar(total), Op::WeightedSum { x, coeff }, &[x]))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Matrix::scalar(total), Op::SumSquares(x), &[x])
    }

    /// `Σ c_i · x_i` over same-shaped inputs, summed left to right.
    pub fn lin_comb(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidInput("empty linear combination".into()))?;
        let shape = self.value(first.0).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for &(v, c) in &terms {
            let val = self.value(v);
            if val.shape() != shape {
                return Err(Error::Shape("lin_comb shapes".into()));
            }
            for (o, x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += c * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(out, Op::LinComb(terms), &inputs))
    }

    /// Reverse pass from a 1x1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        if !out_val.item().is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite loss {}",
                out_val.item()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    g.matmul_nt_into(bv, &mut da, false);
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    av.matmul_tn_into(g, &mut db, false);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], Matrix::from_raw(g.rows(), g.cols(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], Matrix::from_raw(g.rows(), g.cols(), d));
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gg, &z)| {
                        let s = sigmoid(z);
                        gg * s * (1.0 + z * (1.0 - s))
                    })
                    .collect();
                accumulate(&mut grads[x.0], Matrix::from_raw(g.rows(), g.cols(), d));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let cols = xv.cols();
                if self.wants(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..xv.rows() {
                        let inv = inv_rms[r];
                        for ((d, z), gg) in dg.data_mut().iter_mut().zip(xv.row(r)).zip(g.row(r)) {
                            *d += gg * z * inv;
                        }
                    }
                    accumulate(&mut grads[gain.0], dg);
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), cols);
                    for r in 0..xv.rows() {
                        let inv = inv_rms[r];
                        let row = xv.row(r);
                        // dxhat = g ⊙ gain; dx = inv · (dxhat − xhat · mean(dxhat ⊙ xhat))
                        let mut proj = 0.0;
                        for c in 0..cols {
                            proj += g.get(r, c) * gv.data()[c] * row[c] * inv;
                        }
                        proj /= cols as f64;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            let dxhat = g.get(r, c) * gv.data()[c];
                            *d = inv * (dxhat - row[c] * inv * proj);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, gg) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
                accumulate(&mut grads[table.0], dt);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *seq_len, probs, g, grads),
            Op::Softmax(logits) => {
                let p = node.value.as_ref();
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, pp), gg) in d.row_mut(r).iter_mut().zip(pr).zip(gr) {
                        *o = pp * (gg - inner);
                    }
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::MaskedSoftmax { logits } => {
                // Unselected outputs are identically zero, so their p = 0
                // removes them from the Jacobian automatically.
                let p = node.value.as_ref();
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, pp), gg) in d.row_mut(r).iter_mut().zip(pr).zip(gr) {
                        *o = pp * (gg - inner);
                    }
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, gg) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += gg;
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::ScatterRows { x, rows } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    d.row_mut(i).copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::GatherEntries { x, col, rows } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    let cur = d.get(r, *col);
                    d.set(r, *col, cur + g.get(i, 0));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::ScaleRows { x, scale } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                if self.wants(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let s = sv.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                if self.wants(*scale) {
                    let data = (0..xv.rows())
                        .map(|r| xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[scale.0], Matrix::from_raw(xv.rows(), 1, data));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g.item();
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    let w = weights[r] * scale;
                    if w == 0.0 {
                        continue;
                    }
                    for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = w * p;
                    }
                    let t = targets[r];
                    d.set(r, t, d.get(r, t) - w);
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::WeightedSum { x, coeff } => {
                let mut d = coeff.clone();
                d.scale_in_place(g.item());
                accumulate(&mut grads[x.0], d);
            }
            Op::SumSquares(x) => {
                let mut d = self.value(*x).clone();
                d.scale_in_place(2.0 * g.item());
                accumulate(&mut grads[x.0], d);
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        let mut d = g.clone();
                        d.scale_in_place(c);
                        accumulate(&mut grads[v.0], d);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: &[f64],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Matrix::zeros(rows, width);
        let mut dk = Matrix::zeros(rows, width);
        let mut dv = Matrix::zeros(rows, width);
        let mut dp = vec![0.0; seq_len];
        for s in 0..rows / seq_len {
            let base = s * seq_len;
            for h in 0..heads {
                let c0 = h * d;
                let pbase = (s * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let prow = &probs[pbase + i * seq_len..pbase + i * seq_len + i + 1];
                    let gi = &g.row(base + i)[c0..c0 + d];
                    // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                    for j in 0..=i {
                        let vj = &vv.row(base + j)[c0..c0 + d];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let pij = prow[j];
                        for (o, gg) in dv.row_mut(base + j)[c0..c0 + d].iter_mut().zip(gi) {
                            *o += pij * gg;
                        }
                    }
                    let inner: f64 = prow.iter().zip(&dp[..=i]).map(|(a, b)| a * b).sum();
                    let qi = &qv.row(base + i)[c0..c0 + d];
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(base + j)[c0..c0 + d];
                        for (o, x) in dq.row_mut(base + i)[c0..c0 + d].iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        for (o, x) in dk.row_mut(base + j)[c0..c0 + d].iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                accumulate(&mut grads[var.0], d);
            }
        }
    }
}

/// Gradient of a tape-built scalar function with respect to `params`.
///
/// `build` receives fresh leaves for `params` (all requiring gradients) and
/// returns the scalar output.
pub fn grad<F>(params: &[Matrix], build: F) -> Result<(f64, Vec<Matrix>)>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p, true)).collect();
    let out = build(&mut tape, &leaves)?;
    let value = tape.value(out).item();
    let grads = tape.backward(out)?;
    let per_param = leaves
        .iter()
        .zip(params)
        .map(|(&l, p)| {
            grads
                .get(l)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((value, per_param))
}
