//! Operation tape for reverse-mode differentiation.
//!
//! A tape owns an append-only list of nodes. Ops validate shapes, compute the
//! forward value eagerly, and push a node recording the adjoint inputs; node
//! inputs always precede the node itself, so `backward` is a single reverse
//! sweep. Tensors created outside the tape are interned as constant leaves on
//! first use.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{NodeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Relu { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, epsilon: f64 },
    Transpose { x: usize, axis_a: usize, axis_b: usize },
    Reshape { x: usize },
    Gather { table: usize, ids: Arc<Vec<usize>> },
    Sum { x: usize },
    CrossEntropy { logits: usize, targets: Arc<Vec<usize>> },
    Dropout { x: usize, mask: Arc<Vec<f64>> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Register a differentiable leaf (a parameter).
    pub fn var(&mut self, value: &Tensor) -> Tensor {
        self.push_leaf(value, true)
    }

    /// Register a non-differentiable leaf (input data, masks, encodings).
    pub fn constant(&mut self, value: &Tensor) -> Tensor {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: &Tensor, requires_grad: bool) -> Tensor {
        let index = self.nodes.len();
        let out = value.detached().with_node(NodeRef {
            tape: self.id,
            index,
        });
        self.nodes.push(Node {
            op: Op::Leaf,
            value: out.clone(),
            requires_grad,
        });
        out
    }

    /// Node index of `t` on this tape, interning it as a constant if needed.
    fn resolve(&mut self, t: &Tensor) -> usize {
        match t.node() {
            Some(node) if node.tape == self.id => node.index,
            _ => self.constant(t).node().expect("fresh leaf").index,
        }
    }

    fn push_op(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[usize]) -> Tensor {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let index = self.nodes.len();
        let out = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_node(NodeRef {
                tape: self.id,
                index,
            });
        self.nodes.push(Node {
            op,
            value: out.clone(),
            requires_grad,
        });
        out
    }

    // ---- primitive operations -------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    /// Leading dims must match exactly, or `b` may be rank 2 and is then
    /// shared across all leading dims of `a`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() < 2 || b.rank() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        let lead_a = &a.shape()[..a.rank() - 2];
        let lead_b = &b.shape()[..b.rank() - 2];
        let b_shared = b.rank() == 2 && a.rank() > 2;
        if ka != kb || (!b_shared && lead_a != lead_b) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let a_slab = &a.data()[i * m * ka..(i + 1) * m * ka];
            let b_slab = if b_shared {
                b.data()
            } else {
                &b.data()[i * kb * n..(i + 1) * kb * n]
            };
            mm(a_slab, b_slab, m, ka, n, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = lead_a.to_vec();
        shape.push(m);
        shape.push(n);
        let (ia, ib) = (self.resolve(a), self.resolve(b));
        Ok(self.push_op(Op::Matmul { a: ia, b: ib }, shape, out, &[ia, ib]))
    }

    /// Element-wise sum of two tensors of identical shape.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let (ia, ib) = (self.resolve(a), self.resolve(b));
        Ok(self.push_op(Op::Add { a: ia, b: ib }, a.shape().to_vec(), data, &[ia, ib]))
    }

    /// Add a vector along the trailing dim: `[..., d] + [d]`.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = *x.shape().last().unwrap_or(&0);
        if bias.shape() != [d] || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        let (ix, ib) = (self.resolve(x), self.resolve(bias));
        Ok(self.push_op(Op::AddBias { x: ix, bias: ib }, x.shape().to_vec(), data, &[ix, ib]))
    }

    /// Element-wise product of two tensors of identical shape.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (ia, ib) = (self.resolve(a), self.resolve(b));
        Ok(self.push_op(Op::Mul { a: ia, b: ib }, a.shape().to_vec(), data, &[ia, ib]))
    }

    /// Multiply every element by a scalar constant.
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Tensor {
        let data = x.data().iter().map(|v| v * factor).collect();
        let ix = self.resolve(x);
        self.push_op(Op::Scale { x: ix, factor }, x.shape().to_vec(), data, &[ix])
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let ix = self.resolve(x);
        self.push_op(Op::Relu { x: ix }, x.shape().to_vec(), data, &[ix])
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: x.rank(),
            });
        }
        let data = softmax_forward(x.data(), x.shape(), axis);
        let ix = self.resolve(x);
        Ok(self.push_op(Op::Softmax { x: ix, axis }, x.shape().to_vec(), data, &[ix]))
    }

    /// Layer normalization over the trailing dim with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        epsilon: f64,
    ) -> Result<Tensor> {
        if epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm epsilon must be positive, got {epsilon}"
            )));
        }
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; x.len()];
        for (xi, yi) in x.data().chunks(d).zip(data.chunks_mut(d)) {
            let mean = xi.iter().sum::<f64>() / d as f64;
            let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            for j in 0..d {
                yi[j] = gain.data()[j] * (xi[j] - mean) * inv + bias.data()[j];
            }
        }
        let (ix, ig, ib) = (self.resolve(x), self.resolve(gain), self.resolve(bias));
        Ok(self.push_op(
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                epsilon,
            },
            x.shape().to_vec(),
            data,
            &[ix, ig, ib],
        ))
    }

    /// Swap two axes, materializing the permuted layout.
    pub fn transpose(&mut self, x: &Tensor, axis_a: usize, axis_b: usize) -> Result<Tensor> {
        let rank = x.rank();
        if axis_a >= rank || axis_b >= rank {
            return Err(Error::AxisOutOfRange {
                axis: axis_a.max(axis_b),
                rank,
            });
        }
        let (shape, data) = transpose_copy(x.data(), x.shape(), axis_a, axis_b);
        let ix = self.resolve(x);
        Ok(self.push_op(
            Op::Transpose {
                x: ix,
                axis_a,
                axis_b,
            },
            shape,
            data,
            &[ix],
        ))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != x.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        let ix = self.resolve(x);
        Ok(self.push_op(Op::Reshape { x: ix }, shape, x.data().to_vec(), &[ix]))
    }

    /// Row lookup: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    pub fn gather(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if table.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "gather expects a rank-2 table, got shape {:?}",
                table.shape()
            )));
        }
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::InvalidArgument(format!(
                    "id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let it = self.resolve(table);
        Ok(self.push_op(
            Op::Gather {
                table: it,
                ids: Arc::new(ids.to_vec()),
            },
            vec![ids.len(), d],
            data,
            &[it],
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let total: f64 = x.data().iter().sum();
        let ix = self.resolve(x);
        self.push_op(Op::Sum { x: ix }, vec![], vec![total], &[ix])
    }

    /// Per-row cross entropy `-log softmax(logits)[target]` for `[n, v]`
    /// logits, producing `[n]`.
    pub fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        if logits.rank() != 2 || logits.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = logits.shape()[1];
        let mut data = Vec::with_capacity(targets.len());
        for (row, &t) in logits.data().chunks(v).zip(targets) {
            if t >= v {
                return Err(Error::InvalidArgument(format!(
                    "target id {t} out of range for vocab {v}"
                )));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.push(lse - row[t]);
        }
        let il = self.resolve(logits);
        Ok(self.push_op(
            Op::CrossEntropy {
                logits: il,
                targets: Arc::new(targets.to_vec()),
            },
            vec![targets.len()],
            data,
            &[il],
        ))
    }

    /// Inverted dropout recorded as an explicit mask op. `keep_prob == 1`
    /// returns the input untouched, so disabled dropout costs nothing and
    /// perturbs nothing.
    pub fn dropout<R: Rng>(&mut self, x: &Tensor, keep_prob: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0 < keep_prob && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout keep_prob must be in (0, 1], got {keep_prob}"
            )));
        }
        if keep_prob == 1.0 {
            return Ok(x.clone());
        }
        let inv = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < keep_prob { inv } else { 0.0 })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ix = self.resolve(x);
        Ok(self.push_op(
            Op::Dropout {
                x: ix,
                mask: Arc::new(mask),
            },
            x.shape().to_vec(),
            data,
            &[ix],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// grad-requiring node reachable from the loss.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let root = match loss.node() {
            Some(node) if node.tape == self.id => node.index,
            _ => return Err(Error::NotOnTape),
        };
        if self.nodes[root].value.len() != 1 {
            return Err(Error::LossNotScalar(
                self.nodes[root].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let dy = upper[0].as_ref().expect("checked above").as_slice();
            self.propagate(i, dy, lower);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches value shape")
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn value(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
                let n = bv.shape()[bv.rank() - 1];
                let batch: usize = av.shape()[..av.rank() - 2].iter().product();
                let b_shared = bv.rank() == 2 && av.rank() > 2;
                if self.needs(*a) {
                    let da = slot(grads, *a, av.len());
                    for i in 0..batch {
                        let dyb = &dy[i * m * n..(i + 1) * m * n];
                        let bb = if b_shared {
                            bv.data()
                        } else {
                            &bv.data()[i * k * n..(i + 1) * k * n]
                        };
                        mm_abt(dyb, bb, m, n, k, &mut da[i * m * k..(i + 1) * m * k]);
                    }
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, bv.len());
                    for i in 0..batch {
                        let dyb = &dy[i * m * n..(i + 1) * m * n];
                        let ab = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = if b_shared {
                            &mut db[..]
                        } else {
                            &mut db[i * k * n..(i + 1) * k * n]
                        };
                        mm_atb(ab, dyb, m, k, n, out);
                    }
                }
            }
            Op::Add { a, b } => {
                for idx in [*a, *b] {
                    if self.needs(idx) {
                        axpy(slot(grads, idx, dy.len()), dy);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    axpy(slot(grads, *x, dy.len()), dy);
                }
                if self.needs(*bias) {
                    let d = self.value(*bias).len();
                    let db = slot(grads, *bias, d);
                    for row in dy.chunks(d) {
                        for (g, v) in db.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = slot(grads, *a, dy.len());
                    for ((g, d), v) in da.iter_mut().zip(dy).zip(bv.data()) {
                        *g += d * v;
                    }
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, dy.len());
                    for ((g, d), v) in db.iter_mut().zip(dy).zip(av.data()) {
                        *g += d * v;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let dx = slot(grads, *x, dy.len());
                    for (g, d) in dx.iter_mut().zip(dy) {
                        *g += d * factor;
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let dx = slot(grads, *x, dy.len());
                    for ((g, d), v) in dx.iter_mut().zip(dy).zip(xv.data()) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let y = self.value(i);
                    let dx = slot(grads, *x, dy.len());
                    softmax_backward(y.data(), dy, y.shape(), *axis, dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                epsilon,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = gv.len();
                let df = d as f64;
                let needs_x = self.needs(*x);
                let needs_g = self.needs(*gain);
                let needs_b = self.needs(*bias);
                // One pass computes all three adjoints; per-position stats are
                // recomputed from the saved input.
                let mut dgain = vec![0.0; if needs_g { d } else { 0 }];
                let mut dbias = vec![0.0; if needs_b { d } else { 0 }];
                let mut dx_all = vec![0.0; if needs_x { xv.len() } else { 0 }];
                for (pos, (xi, dyi)) in xv.data().chunks(d).zip(dy.chunks(d)).enumerate() {
                    let mean = xi.iter().sum::<f64>() / df;
                    let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + epsilon).sqrt();
                    if needs_g || needs_x {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let xh = (xi[j] - mean) * inv;
                            let dxh = dyi[j] * gv.data()[j];
                            if needs_g {
                                dgain[j] += dyi[j] * xh;
                            }
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= df;
                        mean_dxh_xh /= df;
                        if needs_x {
                            let dxi = &mut dx_all[pos * d..(pos + 1) * d];
                            for j in 0..d {
                                let xh = (xi[j] - mean) * inv;
                                let dxh = dyi[j] * gv.data()[j];
                                dxi[j] = (dxh - mean_dxh - xh * mean_dxh_xh) * inv;
                            }
                        }
                    }
                    if needs_b {
                        for j in 0..d {
                            dbias[j] += dyi[j];
                        }
                    }
                }
                if needs_x {
                    axpy(slot(grads, *x, xv.len()), &dx_all);
                }
                if needs_g {
                    axpy(slot(grads, *gain, d), &dgain);
                }
                if needs_b {
                    axpy(slot(grads, *bias, d), &dbias);
                }
            }
            Op::Transpose { x, axis_a, axis_b } => {
                if self.needs(*x) {
                    let y = self.value(i);
                    let (_, back) = transpose_copy(dy, y.shape(), *axis_a, *axis_b);
                    axpy(slot(grads, *x, back.len()), &back);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    axpy(slot(grads, *x, dy.len()), dy);
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let dt = slot(grads, *table, tv.len());
                    for (row, &id) in dy.chunks(d).zip(ids.iter()) {
                        for (g, v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    let dx = slot(grads, *x, n);
                    for g in dx.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let v = lv.shape()[1];
                    let dl = slot(grads, *logits, lv.len());
                    for ((row_i, row), &t) in lv.data().chunks(v).enumerate().zip(targets.iter()) {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        let dyi = dy[row_i];
                        let out = &mut dl[row_i * v..(row_i + 1) * v];
                        for j in 0..v {
                            let p = (row[j] - max).exp() / denom;
                            out[j] += dyi * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let dx = slot(grads, *x, dy.len());
                    for ((g, d), m) in dx.iter_mut().zip(dy).zip(mask.iter()) {
                        *g += d * m;
                    }
                }
            }
        }
    }
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` is a grad-requiring node of
    /// the tape this came from and was reachable from the loss.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        match t.node() {
            Some(node) if node.tape == self.tape => self.grads.get(node.index)?.as_ref(),
            _ => None,
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out += a @ b` for row-major `a: [m, k]`, `b: [k, n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ b^T` for `a: [m, n]`, `b: [k, n]`, out `[m, k]`.
fn mm_abt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// `out += a^T @ c` for `a: [m, k]`, `c: [m, n]`, out `[k, n]`.
fn mm_atb(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += av * cv;
            }
        }
    }
}

fn softmax_forward(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[base + j * inner]);
            }
            let mut denom = 0.0;
            for j in 0..len {
                let e = (data[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                denom += e;
            }
            for j in 0..len {
                out[base + j * inner] /= denom;
            }
        }
    }
    out
}

fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize, dx: &mut [f64]) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += dy[base + j * inner] * y[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] += (dy[idx] - dot) * y[idx];
            }
        }
    }
}

fn transpose_copy(data: &[f64], shape: &[usize], axis_a: usize, axis_b: usize) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(axis_a, axis_b);
    if axis_a == axis_b {
        return (out_shape, data.to_vec());
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(axis_a, axis_b);
    let mut out = vec![0.0; data.len()];
    let mut index = vec![0usize; rank];
    for (pos, slot) in out.iter_mut().enumerate() {
        let mut rem = pos;
        let mut src = 0usize;
        for i in 0..rank {
            let extent_stride: usize = out_shape[i + 1..].iter().product();
            index[i] = rem / extent_stride;
            rem %= extent_stride;
            src += index[i] * perm_strides[i];
        }
        *slot = data[src];
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = tape.matmul(&eye, &a).unwrap();
        assert_eq!(out.data(), a.data());
        let out2 = tape.matmul(&a, &eye).unwrap();
        assert_eq!(out2.data(), a.data());
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_with_shared_rhs() {
        let mut tape = Tape::new();
        let a = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(&a, &w).unwrap();
        assert_eq!(out.shape(), &[2, 1, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 6.0, 8.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = t(&[4], &[0.0, 0.0, 0.0, 0.0]);
        let y = tape.softmax(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let big = t(&[2], &[1000.0, 0.0]);
        let y = tape.softmax(&big, 0).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = t(&[2, 3], &[5.0, -2.0, 0.5, 900.0, -900.0, 3.0]);
        let y = tape.softmax(&x, 1).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            tape.softmax(&x, 2),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn layer_norm_constant_input_collapses_to_bias() {
        let mut tape = Tape::new();
        let x = t(&[4], &[5.0, 5.0, 5.0, 5.0]);
        let gain = Tensor::ones(vec![4]);
        let bias = Tensor::zeros(vec![4]);
        let y = tape.layer_norm(&x, &gain, &bias, 1e-6).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-3);
        }
        let zero_gain = Tensor::zeros(vec![4]);
        let b = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.layer_norm(&x, &zero_gain, &b, 1e-6).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn layer_norm_rejects_bad_epsilon() {
        let mut tape = Tape::new();
        let x = t(&[2], &[1.0, 2.0]);
        let g = Tensor::ones(vec![2]);
        let b = Tensor::zeros(vec![2]);
        assert!(tape.layer_norm(&x, &g, &b, 0.0).is_err());
        assert!(tape.layer_norm(&x, &g, &b, -1.0).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.var(&t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx.shape(), &[2, 3]);
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.var(&t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.var(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(&x),
            Err(Error::LossNotScalar(_))
        ));
    }

    #[test]
    fn backward_rejects_foreign_tensor() {
        let tape = Tape::new();
        let mut other = Tape::new();
        let x = other.var(&Tensor::scalar(1.0));
        assert!(matches!(tape.backward(&x), Err(Error::NotOnTape)));
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut tape = Tape::new();
        let table = tape.var(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = tape.gather(&table, &[1, 1, 0]).unwrap();
        assert_eq!(rows.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum(&rows);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let mut tape = Tape::new();
        let x = t(&[2, 3, 4], (0..24).map(|v| v as f64).collect::<Vec<_>>().as_slice());
        let y = tape.transpose(&x, 0, 2).unwrap();
        assert_eq!(y.shape(), &[4, 3, 2]);
        let z = tape.transpose(&y, 0, 2).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let mut tape = Tape::new();
        let logits = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let ce = tape.cross_entropy(&logits, &[2]).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expect = -(3.0f64.exp() / denom).ln();
        assert!((ce.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dropout_disabled_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.var(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(&x, 1.0, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.node(), x.node());
    }

    #[test]
    fn dropout_mask_scales_by_inverse_keep_prob() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::ones(vec![1000]));
        let y = tape.dropout(&x, 0.5, &mut rng).unwrap();
        for v in y.data() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-15);
        }
        let kept = y.data().iter().filter(|v| **v != 0.0).count();
        assert!(kept > 350 && kept < 650, "kept {kept} of 1000 at p=0.5");
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.var(&t(&[2, 2], &[0.3, -1.2, 2.2, 0.7]));
        let w = tape.var(&t(&[2, 2], &[0.5, 0.1, -0.4, 0.9]));
        let h = tape.matmul(&x, &w).unwrap();
        let r = tape.relu(&h);
        let loss = tape.sum(&r);
        let g1 = tape.backward(&loss).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        assert_eq!(g1.get(&w).unwrap().data(), g2.get(&w).unwrap().data());
        assert_eq!(g1.get(&x).unwrap().data(), g2.get(&x).unwrap().data());
    }
}
