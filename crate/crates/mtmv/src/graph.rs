//! Tape-based reverse-mode autodiff over f64 tensors.
//!
//! A `Graph` is a flat arena of nodes; every op appends a node holding its
//! forward value and the indices of its inputs, so insertion order is already
//! a topological order. `backward` sweeps the tape once in reverse and
//! accumulates into the gradient buffers of the trainable leaves.
//!
//! Shape rules are strict: elementwise ops demand identical shapes and the
//! only broadcast is bias-add (matrix + row vector). Axis ops (softmax,
//! norms, concat) act on the last axis and accept rank-1 or rank-2 inputs,
//! a rank-1 tensor being a single row. Any op whose output contains a NaN
//! or infinity poisons the graph; `healthy()` reports the first offender.

use crate::tensor::{Param, Tensor};
use rand::Rng;
use std::collections::HashMap;

/// Probabilities are floored at this value before logs inside KL.
pub const KL_FLOOR: f64 = 1e-12;

/// Last-axis norms below this are treated as zero in backward (subgradient 0).
const NORM_EPS: f64 = 1e-12;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf(Param),
    Constant,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, b: NodeId, rows: usize, cols: usize },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Softmax { x: NodeId, rows: usize, cols: usize },
    LogSoftmax { x: NodeId, rows: usize, cols: usize },
    Mean { x: NodeId },
    Sum { x: NodeId },
    L2NormLast { x: NodeId, rows: usize, cols: usize },
    Concat { xs: Vec<NodeId>, rows: usize, widths: Vec<usize> },
    Exp { x: NodeId },
    Neg { x: NodeId },
    Scale { x: NodeId, c: f64 },
    Dropout { x: NodeId, mask: Vec<f64> },
    StopGrad,
    Row { x: NodeId, row: usize, cols: usize },
    Elem { x: NodeId, index: usize },
    WeightedSum { xs: Vec<NodeId>, w: NodeId },
    KlDiv { p: NodeId, q: NodeId, rows: usize, cols: usize },
    ClampMax { x: NodeId, max: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_ids: HashMap<usize, NodeId>,
    nonfinite: Option<String>,
}

/// Interprets a shape as rows over the last axis. Rank-1 is a single row.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("axis op wants rank 1 or 2, got shape {shape:?}"),
    }
}

// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m,k] += a[m,n] * b[k,n]^T
fn mm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            orow[kk] += acc;
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
fn mm_tn(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].data.len(), 1, "scalar() on non-scalar node");
        self.nodes[id].data[0]
    }

    /// Ok unless some op has produced a NaN or infinity; reports the first.
    pub fn healthy(&self) -> Result<(), String> {
        match &self.nonfinite {
            None => Ok(()),
            Some(what) => Err(what.clone()),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool, label: &str) -> NodeId {
        if self.nonfinite.is_none() && data.iter().any(|v| !v.is_finite()) {
            self.nonfinite = Some(format!("non-finite output of {label} (node {})", self.nodes.len()));
        }
        self.nodes.push(Node { shape, data, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Inserts a trainable leaf, snapshotting the parameter's current value.
    /// Repeated calls for the same parameter return the same node.
    pub fn leaf(&mut self, p: &Param) -> NodeId {
        if let Some(&id) = self.leaf_ids.get(&p.ptr_id()) {
            return id;
        }
        let (shape, data) = {
            let t = p.value();
            (t.shape().to_vec(), t.data().to_vec())
        };
        let label = format!("leaf({})", p.name());
        let id = self.push(shape, data, Op::Leaf(p.clone()), true, &label);
        self.leaf_ids.insert(p.ptr_id(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Constant, false, "constant")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul wants rank-2 inputs, got {sa:?} x {sb:?}");
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        assert_eq!(k, k2, "matmul inner dims differ: {sa:?} x {sb:?}");
        let mut out = vec![0.0; m * n];
        mm_nn(&mut out, &self.nodes[a].data, &self.nodes[b].data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng, "matmul")
    }

    /// Elementwise add, or bias-add when `a` is rank-2 and `b` a matching row vector.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ng = self.needs(a) || self.needs(b);
        if sa == sb {
            let data: Vec<f64> =
                self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(x, y)| x + y).collect();
            self.push(sa, data, Op::Add { a, b }, ng, "add")
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            let (rows, cols) = (sa[0], sa[1]);
            let mut data = self.nodes[a].data.clone();
            for r in 0..rows {
                let row = &mut data[r * cols..(r + 1) * cols];
                for (x, y) in row.iter_mut().zip(&self.nodes[b].data) {
                    *x += y;
                }
            }
            self.push(sa, data, Op::AddBias { a, b, rows, cols }, ng, "add_bias")
        } else {
            panic!("add shape mismatch: {sa:?} + {sb:?}");
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data: Vec<f64> =
            self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Sub { a, b }, ng, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data: Vec<f64> =
            self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Mul { a, b }, ng, "mul")
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Relu { x }, ng, "relu")
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(x));
        assert!(cols > 0, "softmax over empty axis");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let xin = &self.nodes[x].data[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            let mx = xin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out.iter_mut().zip(xin) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Softmax { x, rows, cols }, ng, "softmax")
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(x));
        assert!(cols > 0, "log_softmax over empty axis");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let xin = &self.nodes[x].data[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            let mx = xin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = xin.iter().map(|v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            for (o, v) in out.iter_mut().zip(xin) {
                *o = v - lz;
            }
        }
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::LogSoftmax { x, rows, cols }, ng, "log_softmax")
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].data.len();
        assert!(n > 0, "mean of empty tensor");
        let v = self.nodes[x].data.iter().sum::<f64>() / n as f64;
        let ng = self.needs(x);
        self.push(vec![1], vec![v], Op::Mean { x }, ng, "mean")
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].data.iter().sum::<f64>();
        let ng = self.needs(x);
        self.push(vec![1], vec![v], Op::Sum { x }, ng, "sum")
    }

    /// Euclidean norm of each row: (rows, cols) -> (rows,).
    pub fn l2_norm_last(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(x));
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let xin = &self.nodes[x].data[r * cols..(r + 1) * cols];
            data[r] = xin.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let ng = self.needs(x);
        self.push(vec![rows], data, Op::L2NormLast { x, rows, cols }, ng, "l2_norm_last")
    }

    /// Concatenates rank-2 inputs along the last axis; row counts must agree.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat of nothing");
        let rows = rows_cols(self.shape(xs[0])).0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x));
            assert_eq!(r, rows, "concat row mismatch");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (&x, &w) in xs.iter().zip(&widths) {
                let src = &self.nodes[x].data[r * w..(r + 1) * w];
                data[r * total + off..r * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        let shape = if self.shape(xs[0]).len() == 1 { vec![total] } else { vec![rows, total] };
        self.push(shape, data, Op::Concat { xs: xs.to_vec(), rows, widths }, ng, "concat_last")
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.exp()).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Exp { x }, ng, "exp")
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| -v).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Neg { x }, ng, "neg")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        assert!(c.is_finite(), "scale by non-finite constant");
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| c * v).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Scale { x, c }, ng, "scale")
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales kept elements by `1 / (1 - rate)`, so the expectation is the
    /// identity. `rate == 0` is the identity and consumes no randomness.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f64> =
            (0..self.nodes[x].data.len()).map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 }).collect();
        let data: Vec<f64> = self.nodes[x].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Dropout { x, mask }, ng, "dropout")
    }

    /// Identity value through which no gradient flows.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x].data.clone();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::StopGrad, false, "stop_gradient")
    }

    /// Extracts row `row` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, x: NodeId, row: usize) -> NodeId {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "row() wants a rank-2 input");
        let (rows, cols) = (s[0], s[1]);
        assert!(row < rows, "row {row} out of range ({rows} rows)");
        let data = self.nodes[x].data[row * cols..(row + 1) * cols].to_vec();
        let ng = self.needs(x);
        self.push(vec![cols], data, Op::Row { x, row, cols }, ng, "row")
    }

    /// Extracts element `index` of a rank-1 tensor as a single-element tensor.
    pub fn elem(&mut self, x: NodeId, index: usize) -> NodeId {
        let s = self.shape(x);
        assert_eq!(s.len(), 1, "elem() wants a rank-1 input");
        assert!(index < s[0], "elem {index} out of range ({} elements)", s[0]);
        let data = vec![self.nodes[x].data[index]];
        let ng = self.needs(x);
        self.push(vec![1], data, Op::Elem { x, index }, ng, "elem")
    }

    /// Mixture Σ_i w[i] · xs[i] with a rank-1 weight vector. Zero-weight terms
    /// are skipped entirely, so a one-hot weight reproduces the selected input
    /// bit for bit.
    pub fn weighted_sum(&mut self, xs: &[NodeId], w: NodeId) -> NodeId {
        assert!(!xs.is_empty(), "weighted_sum of nothing");
        assert_eq!(self.shape(w), &[xs.len()], "weight length must match input count");
        let shape = self.shape(xs[0]).to_vec();
        for &x in xs {
            assert_eq!(self.shape(x), &shape[..], "weighted_sum shape mismatch");
        }
        let n = self.nodes[xs[0]].data.len();
        let mut data = vec![0.0; n];
        let mut first = true;
        for (i, &x) in xs.iter().enumerate() {
            let wi = self.nodes[w].data[i];
            if wi == 0.0 {
                continue;
            }
            let src = &self.nodes[x].data;
            if first {
                for (d, s) in data.iter_mut().zip(src) {
                    *d = wi * s;
                }
                first = false;
            } else {
                for (d, s) in data.iter_mut().zip(src) {
                    *d += wi * s;
                }
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x)) || self.needs(w);
        self.push(shape, data, Op::WeightedSum { xs: xs.to_vec(), w }, ng, "weighted_sum")
    }

    /// Row-mean KL divergence Σ_i p_i (log p_i − log q_i) with q floored at
    /// `KL_FLOOR` before the log and 0·log 0 := 0 on the p side. Inputs are
    /// same-shape probability rows; output is a single-element tensor holding
    /// the mean over rows.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> NodeId {
        assert_eq!(self.shape(p), self.shape(q), "kl_div shape mismatch");
        let (rows, cols) = rows_cols(self.shape(p));
        let mut acc = 0.0;
        for r in 0..rows {
            let pr = &self.nodes[p].data[r * cols..(r + 1) * cols];
            let qr = &self.nodes[q].data[r * cols..(r + 1) * cols];
            for (&pi, &qi) in pr.iter().zip(qr) {
                if pi != 0.0 {
                    acc += pi * (pi.ln() - qi.max(KL_FLOOR).ln());
                }
            }
        }
        let v = acc / rows as f64;
        let ng = self.needs(p) || self.needs(q);
        self.push(vec![1], vec![v], Op::KlDiv { p, q, rows, cols }, ng, "kl_div")
    }

    /// Elementwise min(x, max); gradient passes only where x < max.
    pub fn clamp_max(&mut self, x: NodeId, max: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.min(max)).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::ClampMax { x, max }, ng, "clamp_max")
    }

    /// Reverse sweep from a scalar output. Gradients of every reachable
    /// trainable leaf are accumulated (added) into the parameter buffers.
    pub fn backward(&mut self, output: NodeId) {
        assert_eq!(self.nodes[output].data.len(), 1, "backward wants a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output] = Some(vec![1.0]);

        for i in (0..=output).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf(p) => p.accumulate_grad(&gout),
                Op::Constant | Op::StopGrad => {}
                Op::MatMul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    if self.needs(a) {
                        let bdat = &self.nodes[b].data;
                        let buf = grads[a].get_or_insert_with(|| vec![0.0; m * k]);
                        mm_nt(buf, &gout, bdat, m, n, k);
                    }
                    if self.needs(b) {
                        let adat = &self.nodes[a].data;
                        let buf = grads[b].get_or_insert_with(|| vec![0.0; k * n]);
                        mm_tn(buf, adat, &gout, m, k, n);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for t in [a, b] {
                        if self.needs(t) {
                            let buf = grads[t].get_or_insert_with(|| vec![0.0; gout.len()]);
                            for (o, g) in buf.iter_mut().zip(&gout) {
                                *o += g;
                            }
                        }
                    }
                }
                Op::AddBias { a, b, rows, cols } => {
                    let (a, b, rows, cols) = (*a, *b, *rows, *cols);
                    if self.needs(a) {
                        let buf = grads[a].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for (o, g) in buf.iter_mut().zip(&gout) {
                            *o += g;
                        }
                    }
                    if self.needs(b) {
                        let buf = grads[b].get_or_insert_with(|| vec![0.0; cols]);
                        for r in 0..rows {
                            for (o, g) in buf.iter_mut().zip(&gout[r * cols..(r + 1) * cols]) {
                                *o += g;
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let buf = grads[a].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for (o, g) in buf.iter_mut().zip(&gout) {
                            *o += g;
                        }
                    }
                    if self.needs(b) {
                        let buf = grads[b].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for (o, g) in buf.iter_mut().zip(&gout) {
                            *o -= g;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bdat = self.nodes[b].data.clone();
                        let buf = grads[a].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for ((o, g), v) in buf.iter_mut().zip(&gout).zip(&bdat) {
                            *o += g * v;
                        }
                    }
                    if self.needs(b) {
                        let adat = self.nodes[a].data.clone();
                        let buf = grads[b].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for ((o, g), v) in buf.iter_mut().zip(&gout).zip(&adat) {
                            *o += g * v;
                        }
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let xdat = self.nodes[x].data.clone();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for ((o, g), v) in buf.iter_mut().zip(&gout).zip(&xdat) {
                            if *v > 0.0 {
                                *o += g;
                            }
                        }
                    }
                }
                Op::Softmax { x, rows, cols } => {
                    let (x, rows, cols) = (*x, *rows, *cols);
                    if self.needs(x) {
                        let y = self.nodes[i].data.clone();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; rows * cols]);
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &gout[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let br = &mut buf[r * cols..(r + 1) * cols];
                            for ((o, &yv), &gv) in br.iter_mut().zip(yr).zip(gr) {
                                *o += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, rows, cols } => {
                    let (x, rows, cols) = (*x, *rows, *cols);
                    if self.needs(x) {
                        let y = self.nodes[i].data.clone();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; rows * cols]);
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &gout[r * cols..(r + 1) * cols];
                            let gsum: f64 = gr.iter().sum();
                            let br = &mut buf[r * cols..(r + 1) * cols];
                            for ((o, &yv), &gv) in br.iter_mut().zip(yr).zip(gr) {
                                *o += gv - yv.exp() * gsum;
                            }
                        }
                    }
                }
                Op::Mean { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let n = self.nodes[x].data.len();
                        let g = gout[0] / n as f64;
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; n]);
                        for o in buf.iter_mut() {
                            *o += g;
                        }
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let n = self.nodes[x].data.len();
                        let g = gout[0];
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; n]);
                        for o in buf.iter_mut() {
                            *o += g;
                        }
                    }
                }
                Op::L2NormLast { x, rows, cols } => {
                    let (x, rows, cols) = (*x, *rows, *cols);
                    if self.needs(x) {
                        let norms = self.nodes[i].data.clone();
                        let xdat = self.nodes[x].data.clone();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; rows * cols]);
                        for r in 0..rows {
                            if norms[r] < NORM_EPS {
                                continue;
                            }
                            let scale = gout[r] / norms[r];
                            let xr = &xdat[r * cols..(r + 1) * cols];
                            let br = &mut buf[r * cols..(r + 1) * cols];
                            for (o, &xv) in br.iter_mut().zip(xr) {
                                *o += scale * xv;
                            }
                        }
                    }
                }
                Op::Concat { xs, rows, widths } => {
                    let (xs, rows, widths) = (xs.clone(), *rows, widths.clone());
                    let total: usize = widths.iter().sum();
                    let mut off = 0;
                    for (&x, &w) in xs.iter().zip(&widths) {
                        if self.needs(x) {
                            let buf = grads[x].get_or_insert_with(|| vec![0.0; rows * w]);
                            for r in 0..rows {
                                let src = &gout[r * total + off..r * total + off + w];
                                for (o, g) in buf[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *o += g;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::Exp { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let y = self.nodes[i].data.clone();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for ((o, g), v) in buf.iter_mut().zip(&gout).zip(&y) {
                            *o += g * v;
                        }
                    }
                }
                Op::Neg { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for (o, g) in buf.iter_mut().zip(&gout) {
                            *o -= g;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    if self.needs(x) {
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for (o, g) in buf.iter_mut().zip(&gout) {
                            *o += c * g;
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    if self.needs(x) {
                        let mask = mask.clone();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for ((o, g), m) in buf.iter_mut().zip(&gout).zip(&mask) {
                            *o += g * m;
                        }
                    }
                }
                Op::Row { x, row, cols } => {
                    let (x, row, cols) = (*x, *row, *cols);
                    if self.needs(x) {
                        let n = self.nodes[x].data.len();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; n]);
                        for (o, g) in buf[row * cols..(row + 1) * cols].iter_mut().zip(&gout) {
                            *o += g;
                        }
                    }
                }
                Op::Elem { x, index } => {
                    let (x, index) = (*x, *index);
                    if self.needs(x) {
                        let n = self.nodes[x].data.len();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; n]);
                        buf[index] += gout[0];
                    }
                }
                Op::WeightedSum { xs, w } => {
                    let (xs, w) = (xs.clone(), *w);
                    let wdat = self.nodes[w].data.clone();
                    for (idx, &x) in xs.iter().enumerate() {
                        if self.needs(x) && wdat[idx] != 0.0 {
                            let wi = wdat[idx];
                            let buf = grads[x].get_or_insert_with(|| vec![0.0; gout.len()]);
                            for (o, g) in buf.iter_mut().zip(&gout) {
                                *o += wi * g;
                            }
                        }
                    }
                    if self.needs(w) {
                        let mut wg = vec![0.0; xs.len()];
                        for (idx, &x) in xs.iter().enumerate() {
                            let xdat = &self.nodes[x].data;
                            wg[idx] = xdat.iter().zip(&gout).map(|(v, g)| v * g).sum();
                        }
                        let buf = grads[w].get_or_insert_with(|| vec![0.0; xs.len()]);
                        for (o, g) in buf.iter_mut().zip(&wg) {
                            *o += g;
                        }
                    }
                }
                Op::KlDiv { p, q, rows, cols } => {
                    let (p, q, rows, cols) = (*p, *q, *rows, *cols);
                    let g = gout[0] / rows as f64;
                    if self.needs(q) {
                        let pdat = self.nodes[p].data.clone();
                        let qdat = self.nodes[q].data.clone();
                        let buf = grads[q].get_or_insert_with(|| vec![0.0; rows * cols]);
                        for ((o, &pi), &qi) in buf.iter_mut().zip(&pdat).zip(&qdat) {
                            if qi >= KL_FLOOR {
                                *o -= g * pi / qi;
                            }
                        }
                    }
                    if self.needs(p) {
                        let pdat = self.nodes[p].data.clone();
                        let qdat = self.nodes[q].data.clone();
                        let buf = grads[p].get_or_insert_with(|| vec![0.0; rows * cols]);
                        for ((o, &pi), &qi) in buf.iter_mut().zip(&pdat).zip(&qdat) {
                            *o += g * (pi.max(KL_FLOOR).ln() + 1.0 - qi.max(KL_FLOOR).ln());
                        }
                    }
                }
                Op::ClampMax { x, max } => {
                    let (x, max) = (*x, *max);
                    if self.needs(x) {
                        let xdat = self.nodes[x].data.clone();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; gout.len()]);
                        for ((o, g), v) in buf.iter_mut().zip(&gout).zip(&xdat) {
                            if *v < max {
                                *o += g;
                            }
                        }
                    }
                }
            }
        }
    }
}
