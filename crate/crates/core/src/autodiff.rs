//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the recording order is already topological. A single
//! [`Tape::backward`] walks the nodes in exact reverse order and consumes the
//! tape. Parameters are bound by reference so a forward pass never copies the
//! model.

use std::borrow::Cow;

use crate::tensor::{gemm, Scalar, Tensor};
use crate::{Error, Result};

/// LayerNorm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Gelu {
        a: usize,
        /// `tanh` of the inner polynomial, reused by the backward pass.
        tanh: Vec<T>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows {
        a: usize,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        scale: T,
        probs: Vec<T>,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        a: usize,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf [`Var`]s.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Recording of one forward pass.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Binds a trainable tensor by reference.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(tensor), Op::Leaf, true)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.nodes[var.0].value.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op,
                left: shape.to_vec(),
                right: vec![],
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check_open()?;
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            trans_b,
            m,
            k,
            n,
        };
        Ok(self.push(Cow::Owned(Tensor::new(vec![m, n], out)?), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "add",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_open()?;
        let factor = T::from_f64(factor);
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Cow::Owned(out), Op::Scale { a: a.0, factor }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let va = self.value(a);
        let tanh: Vec<T> = va.data().iter().map(|&x| gelu_tanh(x)).collect();
        let half = T::from_f64(0.5);
        let data = va
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| half * x * (T::one() + t))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Cow::Owned(out), Op::Gelu { a: a.0, tanh }, rg))
    }

    /// Per-row normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check_open()?;
        let vx = self.value(x);
        let d = vx.cols();
        for p in [gain, bias] {
            let shape = self.value(p).shape();
            if shape != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: vx.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        let rows = vx.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            rstd,
        };
        Ok(self.push(Cow::Owned(out), op, rg))
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let va = self.value(a);
        if va.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_rows input".into()));
        }
        let cols = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Cow::Owned(out), Op::SoftmaxRows { a: a.0 }, rg))
    }

    /// Causal scaled dot-product attention for one head over a batch of
    /// sequences. `q`, `k`, `v` are `(batch·seq)×d_k`, rows grouped by
    /// sequence; position `i` attends to positions `0..=i` of its own
    /// sequence with scores scaled by `1/√d_k`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        self.check_open()?;
        let shape = self.value(q).shape().to_vec();
        for other in [k, v] {
            if self.value(other).shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "causal_attention",
                    left: shape,
                    right: self.value(other).shape().to_vec(),
                });
            }
        }
        if shape.len() != 2 || shape[0] != batch * seq {
            return Err(Error::Shape {
                op: "causal_attention",
                left: shape,
                right: vec![batch, seq],
            });
        }
        let dk = shape[1];
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let block = seq * dk;
        let mut probs = vec![T::zero(); batch * seq * seq];
        let mut out = vec![T::zero(); batch * block];
        for b in 0..batch {
            let p = &mut probs[b * seq * seq..(b + 1) * seq * seq];
            let (qb, kb) = (&qd[b * block..(b + 1) * block], &kd[b * block..(b + 1) * block]);
            gemm(seq, dk, seq, qb, false, kb, true, p, false);
            for (i, row) in p.chunks_mut(seq).enumerate() {
                for s in &mut row[..=i] {
                    *s = *s * scale;
                }
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|s| *s = T::zero());
            }
            let vb = &vd[b * block..(b + 1) * block];
            gemm(seq, seq, dk, p, false, vb, false, &mut out[b * block..(b + 1) * block], false);
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[q, k, v]);
        let op = Op::CausalAttention {
            q: q.0,
            k: k.0,
            v: v.0,
            batch,
            seq,
            scale,
            probs,
        };
        Ok(self.push(Cow::Owned(out), op, rg))
    }

    /// Selects rows of `table` by index; duplicate indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.check_open()?;
        let vt = self.value(table);
        let (rows, cols) = (vt.rows(), vt.cols());
        if idx.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                left: vt.shape().to_vec(),
                right: vec![0],
            });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for (position, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    position,
                    index: i,
                    limit: rows,
                });
            }
            out.extend_from_slice(vt.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], out)?;
        let rg = self.any_grad(&[table]);
        let op = Op::GatherRows {
            table: table.0,
            idx: idx.to_vec(),
        };
        Ok(self.push(Cow::Owned(out), op, rg))
    }

    /// Token embedding lookup: rows of a `V×d` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vocab = self.value(table).rows();
        if let Some((position, &index)) = ids.iter().enumerate().find(|(_, &i)| i >= vocab) {
            return Err(Error::Index {
                what: "embedding_lookup",
                position,
                index,
                limit: vocab,
            });
        }
        self.gather_rows(table, ids)
    }

    /// Mean token-level negative log-likelihood in nats.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_open()?;
        let vl = self.value(logits);
        let (rows, vocab) = (vl.rows(), vl.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some((position, &index)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::Index {
                what: "cross_entropy",
                position,
                index,
                limit: vocab,
            });
        }
        let mut probs = vl.data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            softmax_in_place(row);
            total -= row[t].as_f64().ln();
        }
        let loss = Tensor::scalar(T::from_f64(total / rows as f64));
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Cow::Owned(loss), op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let total = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Cow::Owned(Tensor::scalar(total)), Op::Sum { a: a.0 }, rg))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_open()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
        }
        // Only leaves carry meaningful gradients once the pass is done.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            } => {
                if wants(a) {
                    // da = g · bᵀ (b stored k×n) or g · b (b stored n×k)
                    let bd = nodes[b].value.data();
                    let da = slot(grads, a, m * k);
                    gemm(m, n, k, g, false, bd, !trans_b, da, true);
                }
                if wants(b) {
                    let ad = nodes[a].value.data();
                    if trans_b {
                        // db = gᵀ · a : n×k
                        let db = slot(grads, b, n * k);
                        gemm(n, m, k, g, true, ad, false, db, true);
                    } else {
                        // db = aᵀ · g : k×n
                        let db = slot(grads, b, k * n);
                        gemm(k, m, n, ad, true, g, false, db, true);
                    }
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if wants(j) {
                        let dst = slot(grads, j, g.len());
                        dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if wants(a) {
                    let dst = slot(grads, a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v * factor);
                }
            }
            Op::Gelu { a, tanh } => {
                let a = *a;
                if wants(a) {
                    let x = nodes[a].value.data();
                    let dst = slot(grads, a, g.len());
                    for (((d, &v), &xv), &t) in dst.iter_mut().zip(g).zip(x).zip(tanh) {
                        *d += v * gelu_derivative_from_tanh(xv, t);
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
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = nodes[gain].value.numel();
                let rows = g.len() / d;
                if wants(gain) {
                    let dg = slot(grads, gain, d);
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if wants(bias) {
                    let db = slot(grads, bias, d);
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                }
                if wants(x) {
                    let gd = nodes[gain].value.data();
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let dx = slot(grads, x, rows * d);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gd[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for c in 0..d {
                            let dh = gr[c] * gd[c];
                            dx[r * d + c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::SoftmaxRows { a } => {
                if wants(a) {
                    let y = nodes[i].value.data();
                    let cols = nodes[i].value.cols();
                    let dst = slot(grads, a, g.len());
                    for ((dr, gr), yr) in dst.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
                        for c in 0..cols {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                scale,
                probs,
            } => {
                let (q, k, v, batch, seq, scale) = (*q, *k, *v, *batch, *seq, *scale);
                let dk = nodes[q].value.cols();
                let block = seq * dk;
                let (qd, kd, vd) = (
                    nodes[q].value.data(),
                    nodes[k].value.data(),
                    nodes[v].value.data(),
                );
                let mut ds = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    let p = &probs[b * seq * seq..(b + 1) * seq * seq];
                    let gb = &g[b * block..(b + 1) * block];
                    let rows = b * block..(b + 1) * block;
                    if wants(v) {
                        let dv = &mut slot(grads, v, batch * block)[rows.clone()];
                        gemm(seq, seq, dk, p, true, gb, false, dv, true);
                    }
                    if !wants(q) && !wants(k) {
                        continue;
                    }
                    // dP = g · vᵀ, then the softmax Jacobian row by row.
                    gemm(seq, dk, seq, gb, false, &vd[rows.clone()], true, &mut ds, false);
                    for (i, (dr, pr)) in ds.chunks_mut(seq).zip(p.chunks(seq)).enumerate() {
                        let dot: T = dr[..=i].iter().zip(&pr[..=i]).map(|(&a, &b)| a * b).sum();
                        for j in 0..=i {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                        dr[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                    }
                    if wants(q) {
                        let dq = &mut slot(grads, q, batch * block)[rows.clone()];
                        gemm(seq, seq, dk, &ds, false, &kd[rows.clone()], false, dq, true);
                    }
                    if wants(k) {
                        let dkk = &mut slot(grads, k, batch * block)[rows.clone()];
                        gemm(seq, seq, dk, &ds, true, &qd[rows.clone()], false, dkk, true);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let table = *table;
                if wants(table) {
                    let cols = nodes[table].value.cols();
                    let n = nodes[table].value.numel();
                    let dst = slot(grads, table, n);
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        dst[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                if wants(logits) {
                    let vocab = nodes[logits].value.cols();
                    let w = g[0] / T::from_f64(targets.len() as f64);
                    let dst = slot(grads, logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        let base = r * vocab;
                        for c in 0..vocab {
                            dst[base + c] += probs[base + c] * w;
                        }
                        dst[base + t] = dst[base + t] - w;
                    }
                }
            }
            &Op::Sum { a } => {
                if wants(a) {
                    let n = nodes[a].value.numel();
                    let dst = slot(grads, a, n);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut [T] {
    grads[j].get_or_insert_with(|| vec![T::zero(); len])
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let u = c * (x + a * x * x * x);
    // 1 − 2/(e^{2u}+1) saturates cleanly at ±1 and is much cheaper than libm tanh
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

pub fn gelu_value<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * x * (T::one() + gelu_tanh(x))
}

fn gelu_derivative_from_tanh<T: Scalar>(x: T, t: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let h = 1e-3 * x.data()[i].abs().max(1.0);
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(mat(2, 1, &[1.0, 1.0]));
        let out = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1]);
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatch_naming_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = random(&[3, 4], 1);
        let b0 = random(&[4, 2], 2);
        let w = random(&[3, 2], 3);
        let forward = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (va, vb, vw) = (
                tape.leaf(a.clone(), true),
                tape.leaf(b.clone(), true),
                tape.constant(w.clone()),
            );
            let p = tape.matmul(va, vb).unwrap();
            // weight the output so every entry has a distinct gradient
            let wt = tape.matmul_nt(p, vw).unwrap();
            let s = tape.sum(wt).unwrap();
            (tape.value(s).item(), tape.backward(s).unwrap(), va, vb)
        };
        let (_, grads, va, vb) = forward(&a0, &b0);
        let na = numeric_grad(&a0, |a| forward(a, &b0).0);
        let nb = numeric_grad(&b0, |b| forward(&a0, b).0);
        assert!(max_rel_err(grads.get(va).unwrap(), &na) < 1e-7);
        assert!(max_rel_err(grads.get(vb).unwrap(), &nb) < 1e-7);
    }

    #[test]
    fn softmax_rows_basic_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(2, 2, &[0.0, 0.0, 1000.0, 0.0]));
        let s = tape.softmax_rows(a).unwrap();
        let out = tape.value(s).data();
        assert_eq!(&out[..2], &[0.5, 0.5]);
        assert!((out[2] - 1.0).abs() < 1e-12 && out[3].abs() < 1e-12);

        let r = tape.constant(random(&[4, 4], 9));
        let s = tape.softmax_rows(r).unwrap();
        for row in tape.value(s).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        let nan = tape.constant(mat(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax_rows(nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::filled(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(mat(2, 2, &[3.0, 3.0, 1.0, -1.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] - 1.0).abs() < 1e-5 && (out[3] + 1.0).abs() < 1e-5);

        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.layer_norm(x, bad, b).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_value(0.0f64), 0.0);
        assert!((gelu_value(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu_value(-10.0f64).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::<f64>::zeros(&[3, 7]));
        let l = tape.cross_entropy(uniform, &[0, 3, 6]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);

        let perfect = tape.constant(mat(2, 3, &[50.0, 0.0, 0.0, 0.0, 0.0, 50.0]));
        let l = tape.cross_entropy(perfect, &[0, 2]).unwrap();
        assert!(tape.value(l).item() < 1e-20);

        let err = tape.cross_entropy(perfect, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::Index { position: 1, index: 3, .. }));
    }

    #[test]
    fn embedding_lookup_reports_position() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::<f64>::zeros(&[4, 2]));
        let err = tape.embedding_lookup(table, &[0, 1, 9, 2]).unwrap_err();
        assert!(matches!(err, Error::Index { position: 2, index: 9, limit: 4, .. }));
        let e = tape.embedding_lookup(table, &[3, 3]).unwrap();
        assert_eq!(tape.value(e).shape(), &[2, 2]);
    }

    #[test]
    fn backward_trivial_cases_and_consumption() {
        let x0 = mat(1, 3, &[1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
        assert!(matches!(tape.sum(x), Err(Error::TapeConsumed)));

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let xx = tape.matmul_nt(x, x).unwrap();
        let grads = tape.backward(xx).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(1, 2, &[1.0, 2.0]), true);
        let unused = tape.leaf(mat(1, 2, &[1.0, 2.0]), true);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
    }
}
