//! Reverse-mode differentiation over a per-sample tape.
//!
//! A [`Tape`] records eagerly evaluated operations. Parameters live in a
//! shared, read-only [`ParamStore`]; the tape refers to them by id so that
//! many tapes (one per tile) can be built concurrently against one store.
//! [`Tape::backward`] accepts several seed gradients at once, which is how
//! batch-level losses computed outside the tape (contrastive, reconstruction)
//! are injected back into the per-tile graphs.

use std::collections::HashMap;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn census(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Parameter gradients, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate_param(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self`. Summation order is the caller's order, so a
    /// fixed reduction order yields bit-identical sums.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_param(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.scale_in_place(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    /// First non-finite parameter, if any.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|t| !t.is_finite()))
            .map(|(i, _)| ParamId(i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<f64> },
    MaxPool { x: Var, indices: Vec<usize> },
    Unpool { x: Var, indices: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    RepeatRows { a: Var, times: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Reshape(Var),
    MeanRows(Var),
    SumAll(Var),
    ReplaceRows { a: Var, rows: Vec<usize>, with: Var },
    TableBias { table: Var, head: usize, buckets: Vec<Option<usize>> },
    MasterQueryScores { keys: Var, queries: Var, seq_len: usize },
    GroupedWeightedSum { attn: Var, values: Var, heads: usize, seq_len: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    SqErrSum { a: Var, target: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Eagerly evaluated computation record.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// `a * b`, or `a * b^T` when `tb`.
    pub fn matmul(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let out = crate::tensor::matmul(self.value(a), self.value(b), tb);
        self.push(out, Op::MatMul { a, b, tb })
    }

    /// `x (n x in) * w (in x out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, din) = (xv.rows(), xv.cols());
        assert_eq!(wv.rows(), din, "linear: input {:?} weight {:?}", xv.shape(), wv.shape());
        let dout = wv.cols();
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout);
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bv);
            }
        }
        gemm(n, din, dout, 1.0, xv.data(), false, wv.data(), false, 1.0, &mut out);
        self.push(Tensor::from_vec(&[n, dout], out), Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add {:?} + {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(av.shape(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(av.shape(), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(av.shape(), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    /// Adds row vector `v` (length = cols) to every row of `a`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let av = self.value(a);
        let vv = self.value(v).data();
        let c = av.cols();
        assert_eq!(vv.len(), c, "add_row: {:?} + {}", av.shape(), vv.len());
        let mut t = av.clone();
        for r in t.data_mut().chunks_mut(c) {
            for (x, y) in r.iter_mut().zip(vv) {
                *x += y;
            }
        }
        self.push(t, Op::AddRow(a, v))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a))
    }

    /// Layer normalisation over the last dimension (rows of a 2-D view).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c);
        let rows = xv.len() / c;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row-wise softmax. `-inf` logits get exactly zero weight; every row
    /// must contain at least one finite logit.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        self.push(t, Op::SoftmaxRows(a))
    }

    /// 2-D convolution, stride 1, zero "same" padding, odd square kernel.
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b).data();
        let (n, cin, h, wd) = dims4(xv.shape());
        let (cout, cin2, k, k2) = dims4(wv.shape());
        assert_eq!(cin, cin2, "conv2d channels {:?} vs {:?}", xv.shape(), wv.shape());
        assert!(k == k2 && k % 2 == 1);
        let hw = h * wd;
        let ck = cin * k * k;
        let mut cols = vec![0.0; n * ck * hw];
        let mut out = vec![0.0; n * cout * hw];
        for s in 0..n {
            let col = &mut cols[s * ck * hw..(s + 1) * ck * hw];
            im2col(&xv.data()[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, k, col);
            let o = &mut out[s * cout * hw..(s + 1) * cout * hw];
            for (co, plane) in o.chunks_mut(hw).enumerate() {
                plane.fill(bv[co]);
            }
            gemm(cout, ck, hw, 1.0, wv.data(), false, col, false, 1.0, o);
        }
        let t = Tensor::from_vec(&[n, cout, h, wd], out);
        self.push(t, Op::Conv2d { x, w, b, cols })
    }

    /// Non-overlapping `k x k` max pooling. Returns the pooled node and, for
    /// every output cell, the flat index of its argmax inside the input
    /// plane (first maximum in row-major scan order).
    pub fn max_pool(&mut self, x: Var, k: usize) -> (Var, Vec<usize>) {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv.shape());
        assert!(h % k == 0 && w % k == 0, "max_pool {k} on {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut idx = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = (i * k) * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let p = (i * k + di) * w + j * k + dj;
                            if src[p] > best {
                                best = src[p];
                                arg = p;
                            }
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    out[o] = best;
                    idx[o] = arg;
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, oh, ow], out);
        let v = self.push(t, Op::MaxPool { x, indices: idx.clone() });
        (v, idx)
    }

    /// Scatters each input cell to `indices[cell]` of an `out_h x out_w`
    /// plane, zeros elsewhere.
    pub fn unpool(&mut self, x: Var, indices: &[usize], out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv.shape());
        assert_eq!(indices.len(), n * c * h * w, "unpool index count");
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            for cell in 0..h * w {
                let i = plane * h * w + cell;
                let target = indices[i];
                assert!(target < out_h * out_w, "unpool index {target} out of range");
                out[plane * out_h * out_w + target] = xv.data()[i];
            }
        }
        let t = Tensor::from_vec(&[n, c, out_h, out_w], out);
        self.push(t, Op::Unpool { x, indices: indices.to_vec() })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::from_vec(&[idx.len(), c], data);
        self.push(t, Op::GatherRows { a, idx: idx.to_vec() })
    }

    /// `[n, c] -> [n * times, c]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(av.len() * times);
        for r in 0..av.rows() {
            for _ in 0..times {
                data.extend_from_slice(av.row(r));
            }
        }
        let t = Tensor::from_vec(&[av.rows() * times, c], data);
        self.push(t, Op::RepeatRows { a, times })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let t = Tensor::concat_rows(&vals);
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &wdt) in parts.iter().zip(&widths) {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + wdt].copy_from_slice(pv.row(r));
            }
            off += wdt;
        }
        let t = Tensor::from_vec(&[rows, total], data);
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let t = Tensor::from_vec(&[rows, len], data);
        self.push(t, Op::SliceCols { a, start })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        self.push(t, Op::Reshape(a))
    }

    /// `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::from_vec(&[1, c], out), Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Replaces the listed rows of `a` with the row vector `with`.
    pub fn replace_rows(&mut self, a: Var, rows: &[usize], with: Var) -> Var {
        let mut t = self.value(a).clone();
        let wv = self.value(with).data().to_vec();
        assert_eq!(wv.len(), t.cols());
        for &r in rows {
            t.row_mut(r).copy_from_slice(&wv);
        }
        self.push(t, Op::ReplaceRows { a, rows: rows.to_vec(), with })
    }

    /// `[nq, nk]` logits bias read from `table[head, bucket]`; `None`
    /// buckets become `-inf`.
    pub fn table_bias(&mut self, table: Var, head: usize, buckets: &[Option<usize>], nq: usize, nk: usize) -> Var {
        assert_eq!(buckets.len(), nq * nk);
        let tv = self.value(table);
        let k = tv.cols();
        let data = buckets
            .iter()
            .map(|b| match b {
                Some(b) => tv.data()[head * k + b],
                None => f64::NEG_INFINITY,
            })
            .collect();
        let t = Tensor::from_vec(&[nq, nk], data);
        self.push(t, Op::TableBias { table, head, buckets: buckets.to_vec() })
    }

    /// Per-sequence, per-head scores of learned master queries against keys.
    ///
    /// `keys: [n * seq_len, heads * dk]`, `queries: [heads, dk]`; output
    /// `[n * heads, seq_len]` scaled by `1/sqrt(dk)`.
    pub fn master_query_scores(&mut self, keys: Var, queries: Var, seq_len: usize) -> Var {
        let kv = self.value(keys);
        let qv = self.value(queries);
        let (heads, dk) = (qv.rows(), qv.cols());
        assert_eq!(kv.cols(), heads * dk);
        let n = kv.rows() / seq_len;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; n * heads * seq_len];
        for s in 0..n {
            for h in 0..heads {
                let q = &qv.data()[h * dk..(h + 1) * dk];
                for t in 0..seq_len {
                    let krow = &kv.row(s * seq_len + t)[h * dk..(h + 1) * dk];
                    let dot: f64 = q.iter().zip(krow).map(|(a, b)| a * b).sum();
                    out[(s * heads + h) * seq_len + t] = dot * scale;
                }
            }
        }
        let t = Tensor::from_vec(&[n * heads, seq_len], out);
        self.push(t, Op::MasterQueryScores { keys, queries, seq_len })
    }

    /// `attn: [n * heads, seq_len]`, `values: [n * seq_len, d]` with `d`
    /// split into `heads` equal channel groups; output `[n, d]` where group
    /// `h` of sequence `s` is the attention-weighted sum of that group.
    pub fn grouped_weighted_sum(&mut self, attn: Var, values: Var, heads: usize) -> Var {
        let av = self.value(attn);
        let vv = self.value(values);
        let seq_len = av.cols();
        let n = av.rows() / heads;
        let d = vv.cols();
        assert_eq!(d % heads, 0);
        assert_eq!(vv.rows(), n * seq_len);
        let g = d / heads;
        let mut out = vec![0.0; n * d];
        for s in 0..n {
            for h in 0..heads {
                let a = av.row(s * heads + h);
                let o = &mut out[s * d + h * g..s * d + (h + 1) * g];
                for (t, &w) in a.iter().enumerate() {
                    let v = &vv.row(s * seq_len + t)[h * g..(h + 1) * g];
                    for (oo, vv) in o.iter_mut().zip(v) {
                        *oo += w * vv;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, d], out);
        self.push(t, Op::GroupedWeightedSum { attn, values, heads, seq_len })
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        let n = targets.len() as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec() })
    }

    /// `sum((a - target)^2)`.
    pub fn sq_err_sum(&mut self, a: Var, target: &[f64]) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), target.len());
        let s: f64 = av.data().iter().zip(target).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s), Op::SqErrSum { a, target: target.to_vec() })
    }

    /// Back-propagates the given seed gradients and returns parameter
    /// gradients. Seeds for the same node are summed.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).len(), "seed gradient shape");
            acc(&mut grads, *v, g.clone());
        }
        let mut out = Gradients::new(self.store.len());
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate_param(*id, &g),
                op => self.backprop_op(op, i, &g, &mut grads),
            }
        }
        out
    }

    fn backprop_op(&self, op: &Op, node: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                // dA = G * op(B)^T
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, 1.0, gd, false, bv.data(), !*tb, 0.0, &mut da);
                acc(grads, *a, Tensor::from_vec(av.shape(), da));
                let mut db = vec![0.0; k * n];
                if *tb {
                    // B is n x k: dB = G^T * A
                    gemm(n, m, k, 1.0, gd, true, av.data(), false, 0.0, &mut db);
                } else {
                    gemm(k, m, n, 1.0, av.data(), true, gd, false, 0.0, &mut db);
                }
                acc(grads, *b, Tensor::from_vec(bv.shape(), db));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (xv.rows(), xv.cols());
                let dout = wv.cols();
                let mut dx = vec![0.0; n * din];
                gemm(n, dout, din, 1.0, gd, false, wv.data(), true, 0.0, &mut dx);
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                let mut dw = vec![0.0; din * dout];
                gemm(din, n, dout, 1.0, xv.data(), true, gd, false, 0.0, &mut dw);
                acc(grads, *w, Tensor::from_vec(wv.shape(), dw));
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for r in gd.chunks(dout) {
                        for (o, v) in db.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(self.value(*b).shape(), db));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone().reshape(self.shape(*a)));
                acc(grads, *b, g.clone().reshape(self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone().reshape(self.shape(*a)));
                acc(grads, *b, g.map(|v| -v).reshape(self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                acc(grads, *a, Tensor::from_vec(av.shape(), da));
                acc(grads, *b, Tensor::from_vec(bv.shape(), db));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|v| v * s)),
            Op::AddRow(a, v) => {
                acc(grads, *a, g.clone());
                let vv = self.value(*v);
                let c = vv.len();
                let mut dv = vec![0.0; c];
                for r in gd.chunks(c) {
                    for (o, x) in dv.iter_mut().zip(r) {
                        *o += x;
                    }
                }
                acc(grads, *v, Tensor::from_vec(vv.shape(), dv));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = av.data().iter().zip(gd).map(|(&x, &g)| g * gelu_grad(x)).collect();
                acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let c = gv.len();
                let rows = rstd.len();
                let mut dx = vec![0.0; rows * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for r in 0..rows {
                    let grow = &gd[r * c..(r + 1) * c];
                    let h = &xhat[r * c..(r + 1) * c];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        dg[j] += grow[j] * h[j];
                        db[j] += grow[j];
                        let dh = grow[j] * gv.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    let inv_c = 1.0 / c as f64;
                    for j in 0..c {
                        let dh = grow[j] * gv.data()[j];
                        dx[r * c + j] = rstd[r] * (dh - inv_c * sum_dh - h[j] * inv_c * sum_dh_h);
                    }
                }
                acc(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                acc(grads, *gamma, Tensor::from_vec(gv.shape(), dg));
                acc(grads, *beta, Tensor::from_vec(self.shape(*beta), db));
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[node].value.as_ref().expect("softmax value");
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::Conv2d { x, w, b, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, cin, h, wd) = dims4(xv.shape());
                let (cout, _, k, _) = dims4(wv.shape());
                let hw = h * wd;
                let ck = cin * k * k;
                let mut dw = vec![0.0; cout * ck];
                let mut dx = vec![0.0; n * cin * hw];
                let mut db = vec![0.0; cout];
                let mut dcol = vec![0.0; ck * hw];
                for s in 0..n {
                    let go = &gd[s * cout * hw..(s + 1) * cout * hw];
                    for (co, plane) in go.chunks(hw).enumerate() {
                        db[co] += plane.iter().sum::<f64>();
                    }
                    let col = &cols[s * ck * hw..(s + 1) * ck * hw];
                    gemm(cout, hw, ck, 1.0, go, false, col, true, 1.0, &mut dw);
                    gemm(ck, cout, hw, 1.0, wv.data(), true, go, false, 0.0, &mut dcol);
                    col2im(&dcol, cin, h, wd, k, &mut dx[s * cin * hw..(s + 1) * cin * hw]);
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                acc(grads, *w, Tensor::from_vec(wv.shape(), dw));
                acc(grads, *b, Tensor::from_vec(self.shape(*b), db));
            }
            Op::MaxPool { x, indices } => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv.shape());
                let per = indices.len() / (n * c);
                let mut dx = vec![0.0; xv.len()];
                for plane in 0..n * c {
                    for cell in 0..per {
                        let i = plane * per + cell;
                        dx[plane * h * w + indices[i]] += gd[i];
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Unpool { x, indices } => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv.shape());
                let (_, _, oh, ow) = dims4(g.shape());
                let mut dx = vec![0.0; xv.len()];
                for plane in 0..n * c {
                    for cell in 0..h * w {
                        let i = plane * h * w + cell;
                        dx[i] = gd[plane * oh * ow + indices[i]];
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::GatherRows { a, idx } => {
                let av = self.value(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += gd[k * c + j];
                    }
                }
                acc(grads, *a, Tensor::from_vec(av.shape(), da));
            }
            Op::RepeatRows { a, times } => {
                let av = self.value(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.len()];
                for r in 0..av.rows() {
                    for t in 0..*times {
                        let src = &gd[(r * times + t) * c..(r * times + t + 1) * c];
                        for (o, v) in da[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                acc(grads, *a, Tensor::from_vec(av.shape(), da));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    acc(grads, *p, Tensor::from_vec(pv.shape(), gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    acc(grads, *p, Tensor::from_vec(pv.shape(), d));
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let c = av.cols();
                let len = g.cols();
                let mut d = vec![0.0; av.len()];
                for r in 0..av.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::Reshape(a) => acc(grads, *a, g.clone().reshape(self.shape(*a))),
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let r = av.rows();
                let inv = 1.0 / r as f64;
                let mut d = Vec::with_capacity(av.len());
                for _ in 0..r {
                    d.extend(gd.iter().map(|v| v * inv));
                }
                acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::SumAll(a) => {
                let s = gd[0];
                acc(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::ReplaceRows { a, rows, with } => {
                let mut da = g.clone();
                let c = da.cols();
                let mut dw = vec![0.0; c];
                for &r in rows {
                    for (o, v) in dw.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                    da.row_mut(r).fill(0.0);
                }
                acc(grads, *a, da.reshape(self.shape(*a)));
                acc(grads, *with, Tensor::from_vec(self.shape(*with), dw));
            }
            Op::TableBias { table, head, buckets } => {
                let tv = self.value(*table);
                let k = tv.cols();
                let mut d = vec![0.0; tv.len()];
                for (b, gv) in buckets.iter().zip(gd) {
                    if let Some(b) = b {
                        d[head * k + b] += gv;
                    }
                }
                acc(grads, *table, Tensor::from_vec(tv.shape(), d));
            }
            Op::MasterQueryScores { keys, queries, seq_len } => {
                let kv = self.value(*keys);
                let qv = self.value(*queries);
                let (heads, dk) = (qv.rows(), qv.cols());
                let n = kv.rows() / seq_len;
                let kc = kv.cols();
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dkeys = vec![0.0; kv.len()];
                let mut dq = vec![0.0; qv.len()];
                for s in 0..n {
                    for h in 0..heads {
                        let q = &qv.data()[h * dk..(h + 1) * dk];
                        for t in 0..*seq_len {
                            let gs = gd[(s * heads + h) * seq_len + t] * scale;
                            if gs == 0.0 {
                                continue;
                            }
                            let row = s * seq_len + t;
                            let krow = &kv.data()[row * kc + h * dk..row * kc + (h + 1) * dk];
                            for j in 0..dk {
                                dkeys[row * kc + h * dk + j] += gs * q[j];
                                dq[h * dk + j] += gs * krow[j];
                            }
                        }
                    }
                }
                acc(grads, *keys, Tensor::from_vec(kv.shape(), dkeys));
                acc(grads, *queries, Tensor::from_vec(qv.shape(), dq));
            }
            Op::GroupedWeightedSum { attn, values, heads, seq_len } => {
                let av = self.value(*attn);
                let vv = self.value(*values);
                let n = av.rows() / heads;
                let d = vv.cols();
                let gsz = d / heads;
                let mut da = vec![0.0; av.len()];
                let mut dv = vec![0.0; vv.len()];
                for s in 0..n {
                    for h in 0..*heads {
                        let go = &gd[s * d + h * gsz..s * d + (h + 1) * gsz];
                        for t in 0..*seq_len {
                            let row = s * seq_len + t;
                            let v = &vv.row(row)[h * gsz..(h + 1) * gsz];
                            da[(s * heads + h) * seq_len + t] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                            let w = av.data()[(s * heads + h) * seq_len + t];
                            for (o, gg) in dv[row * d + h * gsz..row * d + (h + 1) * gsz].iter_mut().zip(go) {
                                *o += w * gg;
                            }
                        }
                    }
                }
                acc(grads, *attn, Tensor::from_vec(av.shape(), da));
                acc(grads, *values, Tensor::from_vec(vv.shape(), dv));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let n = targets.len() as f64;
                let s = gd[0] / n;
                let d = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| s * (sigmoid(z) - y))
                    .collect();
                acc(grads, *logits, Tensor::from_vec(lv.shape(), d));
            }
            Op::SqErrSum { a, target } => {
                let av = self.value(*a);
                let s = gd[0];
                let d = av.data().iter().zip(target).map(|(x, y)| 2.0 * s * (x - y)).collect();
                acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for r in out.data_mut().chunks_mut(c) {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(m.is_finite(), "softmax row without finite logits");
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in r.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a 4-D shape, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ki as isize - pad;
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad;
                        dst[i * w + j] = if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                            x[c * hw + si as usize * w + sj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ki as isize - pad;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kj as isize - pad;
                        if sj >= 0 && sj < w as isize {
                            dx[c * hw + si as usize * w + sj as usize] += src[i * w + j];
                        }
                    }
                }
            }
        }
    }
}
