//! A small reverse-mode tape over 2-D `f64` matrices.
//!
//! Every op records its inputs (and whatever it needs from the forward pass)
//! on the tape; [`Graph::backward`] walks the tape once in reverse. Nodes are
//! appended in evaluation order, so reverse index order is a valid
//! topological order.
//!
//! Parameters live in a [`ParamStore`] that the graph borrows; they are not
//! copied onto the tape.

use std::collections::HashMap;

use crate::model::ModelError;
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Zero-filled buffers shaped like each parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    BroadcastRow(Var),
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    Chamfer {
        pred: Var,
        target: Tensor,
        k: usize,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tape of one forward computation.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

/// Per-patch Chamfer terms and nearest-neighbor indices (first index wins ties).
pub(crate) fn chamfer_patch(a: &[f64], b: &[f64]) -> (f64, Vec<usize>, Vec<usize>) {
    let na = a.len() / 3;
    let nb = b.len() / 3;
    let mut nn_ab = vec![0usize; na];
    let mut nn_ba = vec![0usize; nb];
    let mut best_b = vec![f64::INFINITY; nb];
    let mut sum_a = 0.0;
    for i in 0..na {
        let pa = &a[3 * i..3 * i + 3];
        let mut best = f64::INFINITY;
        for j in 0..nb {
            let pb = &b[3 * j..3 * j + 3];
            let d = (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2);
            if d < best {
                best = d;
                nn_ab[i] = j;
            }
            if d < best_b[j] {
                best_b[j] = d;
                nn_ba[j] = i;
            }
        }
        sum_a += best;
    }
    let sum_b: f64 = best_b.iter().sum();
    (sum_a / na as f64 + sum_b / nb as f64, nn_ab, nn_ba)
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-param node has a value"),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        let (r, c) = (t.rows(), t.cols());
        self.push(t.reshape(vec![r, c]), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (n, k) = self.dims(x);
        let (k2, m) = self.dims(w);
        assert_eq!(k, k2, "matmul inner dims");
        let out = matmul(self.value(x).data(), self.value(w).data(), n, k, m);
        self.push(Tensor::matrix(n, m, out), Op::MatMul(x, w))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt inner dims");
        let out = matmul_bt(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::matrix(n, m, out), Op::MatMulBT(a, b))
    }

    /// Adds a single row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (n, m) = self.dims(x);
        assert_eq!(self.value(b).len(), m, "add_row width");
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        self.push(Tensor::matrix(n, m, out), Op::AddRow(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shapes");
        let (n, m) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Tensor::matrix(n, m, out), Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, f: f64) -> Var {
        let (n, m) = self.dims(x);
        let out = self.value(x).data().iter().map(|v| v * f).collect();
        self.push(Tensor::matrix(n, m, out), Op::Scale(x, f))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.push(Tensor::matrix(n, m, out), Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, m) = self.dims(x);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &xv[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat[r * m + c] = h;
                out[r * m + c] = h * g[c] + b[c];
            }
        }
        self.push(
            Tensor::matrix(n, m, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        self.push(Tensor::matrix(n, m, out), Op::SoftmaxRows(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.dims(x);
        assert!(start + len <= m);
        let xv = self.value(x).data();
        let out = (0..n)
            .flat_map(|r| xv[r * m + start..r * m + start + len].iter().copied())
            .collect();
        self.push(Tensor::matrix(n, len, out), Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                assert_eq!(self.dims(p).0, n, "concat_cols rows");
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::matrix(n, total, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            assert_eq!(c, m, "concat_rows cols");
            n += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::matrix(n, m, out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let m = self.dims(x).1;
        let xv = self.value(x).data();
        let out = idx
            .iter()
            .flat_map(|&r| xv[r * m..(r + 1) * m].iter().copied())
            .collect();
        self.push(Tensor::matrix(idx.len(), m, out), Op::GatherRows(x, idx.to_vec()))
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_row(&mut self, x: Var, n: usize) -> Var {
        let row = self.value(x).data().to_vec();
        let m = row.len();
        let out = (0..n).flat_map(|_| row.iter().copied()).collect();
        self.push(Tensor::matrix(n, m, out), Op::BroadcastRow(x))
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let (n, m) = self.dims(x);
        assert!(group > 0 && n % group == 0, "group_max: {n} rows not divisible by {group}");
        let g = n / group;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; g * m];
        let mut argmax = vec![0usize; g * m];
        for gi in 0..g {
            for r in gi * group..(gi + 1) * group {
                for c in 0..m {
                    let v = xv[r * m + c];
                    if v > out[gi * m + c] || r == gi * group {
                        out[gi * m + c] = v;
                        argmax[gi * m + c] = r;
                    }
                }
            }
        }
        self.push(Tensor::matrix(g, m, out), Op::GroupMax { x, argmax })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let xv = self.value(x).data();
        let mut out = vec![0.0; m];
        for r in 0..n {
            for c in 0..m {
                out[c] += xv[r * m + c];
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(Tensor::matrix(1, m, out), Op::MeanRows(x))
    }

    /// Mean over patches of the symmetric squared-L2 Chamfer distance.
    /// `pred` is `P x (3k)` (one flattened patch per row); `target` has
    /// `P * k * 3` values.
    pub fn chamfer(&mut self, pred: Var, target: Tensor, k: usize) -> Var {
        let (p, w) = self.dims(pred);
        assert_eq!(w, 3 * k, "chamfer width");
        assert_eq!(target.len(), p * 3 * k, "chamfer target size");
        let pv = self.value(pred).data();
        let total: f64 = (0..p)
            .map(|i| {
                let s = i * 3 * k..(i + 1) * 3 * k;
                chamfer_patch(&pv[s.clone()], &target.data()[s]).0
            })
            .sum();
        let loss = if p == 0 { 0.0 } else { total / p as f64 };
        self.push(Tensor::matrix(1, 1, vec![loss]), Op::Chamfer { pred, target, k })
    }

    /// Softmax cross-entropy of one logits row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let row = self.value(logits).data();
        assert!(label < row.len());
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let loss = lse - row[label];
        self.push(Tensor::matrix(1, 1, vec![loss]), Op::CrossEntropy { logits, label })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Gradients of the scalar `loss` with respect to every parameter,
    /// aligned with the store (zeros for parameters not on the tape).
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor>, ModelError> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::MatMul(x, w) => {
                    let (n, k) = self.dims(*x);
                    let m = self.dims(*w).1;
                    let dx = matmul_bt(&gy, self.value(*w).data(), n, m, k);
                    let dw = matmul_at(self.value(*x).data(), &gy, n, k, m);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::MatMulBT(a, b) => {
                    let (n, k) = self.dims(*a);
                    let m = self.dims(*b).0;
                    let da = matmul(&gy, self.value(*b).data(), n, m, k);
                    let db = matmul_at(&gy, self.value(*a).data(), n, m, k);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, b) => {
                    let m = self.dims(*x).1;
                    let mut db = vec![0.0; m];
                    for row in gy.chunks(m) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, gy);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gy.clone());
                    accumulate(&mut grads, *a, gy);
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads, *x, gy.iter().map(|g| g * f).collect());
                }
                Op::Gelu(x) => {
                    let d = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&gy)
                        .map(|(&v, g)| gelu_parts(v).1 * g)
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, m) = self.dims(*x);
                    let g = self.value(*gamma).data();
                    let mut dx = vec![0.0; n * m];
                    let mut dg = vec![0.0; m];
                    let mut db = vec![0.0; m];
                    for r in 0..n {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..m {
                            let gyv = gy[r * m + c];
                            let h = xhat[r * m + c];
                            dg[c] += gyv * h;
                            db[c] += gyv;
                            let dh = gyv * g[c];
                            sum_d += dh;
                            sum_dh += dh * h;
                        }
                        let mf = m as f64;
                        for c in 0..m {
                            let dh = gy[r * m + c] * g[c];
                            dx[r * m + c] = inv_std[r] / mf * (mf * dh - sum_d - xhat[r * m + c] * sum_dh);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().unwrap();
                    let m = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.data().chunks(m).zip(gy.chunks(m)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            dx[r * m + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start) => {
                    let (n, m) = self.dims(*x);
                    let len = node.value.as_ref().unwrap().cols();
                    let mut dx = vec![0.0; n * m];
                    for r in 0..n {
                        dx[r * m + start..r * m + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.as_ref().unwrap().cols();
                    let n = node.value.as_ref().unwrap().rows();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        let d = (0..n)
                            .flat_map(|r| gy[r * total + off..r * total + off + w].iter().copied())
                            .collect();
                        accumulate(&mut grads, p, d);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        accumulate(&mut grads, p, gy[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let (n, m) = self.dims(*x);
                    let mut dx = vec![0.0; n * m];
                    for (o, &r) in idx.iter().enumerate() {
                        for c in 0..m {
                            dx[r * m + c] += gy[o * m + c];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BroadcastRow(x) => {
                    let m = self.value(*x).len();
                    let mut dx = vec![0.0; m];
                    for row in gy.chunks(m) {
                        for (d, g) in dx.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GroupMax { x, argmax, .. } => {
                    let (n, m) = self.dims(*x);
                    let mut dx = vec![0.0; n * m];
                    for (o, &r) in argmax.iter().enumerate() {
                        dx[r * m + o % m] += gy[o];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let (n, m) = self.dims(*x);
                    let mut dx = vec![0.0; n * m];
                    for r in 0..n {
                        for c in 0..m {
                            dx[r * m + c] = gy[c] / n as f64;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Chamfer { pred, target, k } => {
                    let (p, w) = self.dims(*pred);
                    let pv = self.value(*pred).data();
                    let mut dp = vec![0.0; p * w];
                    let scale = gy[0] * 2.0 / (*k as f64) / p as f64;
                    for i in 0..p {
                        let s = i * w..(i + 1) * w;
                        let a = &pv[s.clone()];
                        let b = &target.data()[s];
                        let (_, nn_ab, nn_ba) = chamfer_patch(a, b);
                        let d = &mut dp[i * w..(i + 1) * w];
                        for (ia, &jb) in nn_ab.iter().enumerate() {
                            for c in 0..3 {
                                d[3 * ia + c] += scale * (a[3 * ia + c] - b[3 * jb + c]);
                            }
                        }
                        for (jb, &ia) in nn_ba.iter().enumerate() {
                            for c in 0..3 {
                                d[3 * ia + c] += scale * (a[3 * ia + c] - b[3 * jb + c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *pred, dp);
                }
                Op::CrossEntropy { logits, label } => {
                    let mut p = self.value(*logits).data().to_vec();
                    softmax_in_place(&mut p);
                    p[*label] -= 1.0;
                    for v in &mut p {
                        *v *= gy[0];
                    }
                    accumulate(&mut grads, *logits, p);
                }
            }
        }

        let mut out = self.store.zeros_like();
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = grads[v.0].take() {
                    out[pid].data_mut().copy_from_slice(&g);
                }
            }
        }
        if out.iter().any(|g| !g.all_finite()) {
            return Err(ModelError::NonFiniteGradient);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
