//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records operations as they are evaluated. Parameters are
//! borrowed from a [`ParamStore`] and never copied into the tape;
//! [`Graph::backward`] walks the tape in reverse and returns dense gradients
//! for every parameter that was touched.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::tensor::Matrix;

pub type ParamId = usize;

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        let id = self.values.len();
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| &self.values[id])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.id(name).map(move |id| &mut self.values[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(id, (n, v))| (id, n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Allowed (`true`) or blocked key positions for each query row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every query may see every key whose `key_allowed` flag is set.
    pub fn keys(rows: usize, key_allowed: &[bool]) -> Self {
        let cols = key_allowed.len();
        let mut allowed = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            allowed.extend_from_slice(key_allowed);
        }
        AttentionMask {
            rows,
            cols,
            allowed,
        }
    }

    /// Query `i` may see keys `0..=i` that are also allowed by `key_allowed`.
    pub fn causal(key_allowed: &[bool]) -> Self {
        let n = key_allowed.len();
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            allowed.extend((0..n).map(|j| j <= i && key_allowed[j]));
        }
        AttentionMask {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            allowed.extend((0..cols).map(|j| f(i, j)));
        }
        AttentionMask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Row-wise softmax over allowed entries. Blocked entries get probability 0;
/// a row with no allowed entry is all zeros.
pub fn masked_softmax(x: &Matrix, mask: Option<&AttentionMask>) -> Matrix {
    if let Some(m) = mask {
        assert_eq!(m.shape(), x.shape(), "mask shape mismatch");
    }
    let allowed = |r: usize, c: usize| mask.is_none_or(|m| m.is_allowed(r, c));
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = (0..row.len())
            .filter(|&c| allowed(r, c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for c in 0..row.len() {
            if allowed(r, c) {
                let e = (row[c] - max).exp();
                out_row[c] = e;
                sum += e;
            }
        }
        for v in out_row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Constant,
    Param(ParamId),
    GatherRows { param: ParamId, rows: Vec<usize> },
    GatherCols { param: ParamId, cols: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        smoothing: f64,
    },
    SumScaled(Vec<Var>, f64),
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
}

/// Dense per-parameter gradients; `None` for parameters the graph never read.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scaled(factor);
        }
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    relu_signs: DefaultHasher,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            relu_signs: DefaultHasher::new(),
        }
    }

    fn push(&mut self, value: Cow<'p, Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of the sign pattern of every ReLU input evaluated so far. Two
    /// evaluations with equal signatures lie on the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signs.clone().finish()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params;
        self.push(Cow::Borrowed(params.get(id)), Op::Param(id))
    }

    /// Rows of a parameter table, e.g. an embedding lookup. Rows may repeat.
    pub fn gather_rows(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let table = self.params.get(id);
        let mut out = Matrix::zeros(rows.len(), table.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        self.push(
            Cow::Owned(out),
            Op::GatherRows {
                param: id,
                rows: rows.to_vec(),
            },
        )
    }

    /// Columns of a `1 × n` parameter, as a `1 × cols.len()` row.
    pub fn gather_cols(&mut self, id: ParamId, cols: &[usize]) -> Var {
        let bias = self.params.get(id);
        assert_eq!(bias.rows(), 1, "gather_cols expects a row vector");
        let out = Matrix::row_vector(cols.iter().map(|&c| bias.get(0, c)).collect());
        self.push(
            Cow::Owned(out),
            Op::GatherCols {
                param: id,
                cols: cols.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Cow::Owned(v), Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Cow::Owned(v), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Cow::Owned(v), Op::Add(a, b))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row expects a row vector");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(bias.row(0)) {
                *x += b;
            }
        }
        self.push(Cow::Owned(v), Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scaled(factor);
        self.push(Cow::Owned(v), Op::Scale(a, factor))
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), mask.shape(), "mul_const shape mismatch");
        let v = Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect(),
        );
        self.push(Cow::Owned(v), Op::MulConst(a, mask))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        for &v in x.data() {
            (v > 0.0).hash(&mut self.relu_signs);
        }
        let v = x.map(|v| v.max(0.0));
        self.push(Cow::Owned(v), Op::Relu(a))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, cols), "layer norm gain shape");
        assert_eq!(b.shape(), (1, cols), "layer norm bias shape");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (c, &x) in row.iter().enumerate() {
                let h = (x - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax(&mut self, a: Var, mask: Option<&AttentionMask>) -> Var {
        let v = masked_softmax(self.value(a), mask);
        self.push(Cow::Owned(v), Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(Cow::Owned(v), Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats);
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()))
    }

    /// Summed token cross-entropy of `logits` rows against `targets`; `None`
    /// rows are ignored. With `smoothing = ε` the target distribution is
    /// `(1 − ε)·onehot + ε/V`.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len(), "one target per logits row");
        let probs = masked_softmax(z, None);
        let v = z.cols() as f64;
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            assert!(t < z.cols(), "target {t} outside {} classes", z.cols());
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let nll = lse - row[t];
            loss += if smoothing > 0.0 {
                let mean_nll = lse - row.iter().sum::<f64>() / v;
                (1.0 - smoothing) * nll + smoothing * mean_nll
            } else {
                nll
            };
        }
        self.push(
            Cow::Owned(Matrix::from_vec(1, 1, vec![loss])),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                smoothing,
            },
        )
    }

    /// `factor · Σ parts` over `1 × 1` scalars.
    pub fn sum_scaled(&mut self, parts: &[Var], factor: f64) -> Var {
        let total: f64 = parts.iter().map(|&p| self.value(p).get(0, 0)).sum();
        self.push(
            Cow::Owned(Matrix::from_vec(1, 1, vec![total * factor])),
            Op::SumScaled(parts.to_vec(), factor),
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter read by the graph.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut node_grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut params: Vec<Option<Matrix>> = vec![None; self.params.len()];
        node_grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        fn acc(slot: &mut Option<Matrix>, g: Matrix) {
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => *slot = Some(g),
            }
        }
        let store = self.params;
        fn param_slot<'a>(
            params: &'a mut [Option<Matrix>],
            store: &ParamStore,
            id: ParamId,
        ) -> &'a mut Matrix {
            let (r, c) = store.get(id).shape();
            params[id].get_or_insert_with(|| Matrix::zeros(r, c))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => acc(&mut params[*id], g),
                Op::GatherRows { param, rows } => {
                    let sink = param_slot(&mut params, store, *param);
                    for (i, &r) in rows.iter().enumerate() {
                        for (s, v) in sink.row_mut(r).iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                }
                Op::GatherCols { param, cols } => {
                    let sink = param_slot(&mut params, store, *param);
                    for (i, &c) in cols.iter().enumerate() {
                        sink.data_mut()[c] += g.get(0, i);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    acc(&mut node_grads[a.0], da);
                    acc(&mut node_grads[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    acc(&mut node_grads[a.0], da);
                    acc(&mut node_grads[b.0], db);
                }
                Op::Add(a, b) => {
                    acc(&mut node_grads[a.0], g.clone());
                    acc(&mut node_grads[b.0], g);
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut node_grads[a.0], g);
                    acc(&mut node_grads[b.0], db);
                }
                Op::Scale(a, f) => acc(&mut node_grads[a.0], g.scaled(*f)),
                Op::MulConst(a, mask) => {
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect(),
                    );
                    acc(&mut node_grads[a.0], d);
                }
                Op::Relu(a) => {
                    let out = &node.value;
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(out.data())
                            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                    acc(&mut node_grads[a.0], d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let dy = g.row(r);
                        let xh = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = dy[c] * gv.get(0, c);
                            mean_d += d;
                            mean_dx += d * xh[c];
                            dgain.data_mut()[c] += dy[c] * xh[c];
                            dbias.data_mut()[c] += dy[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let d = dy[c] * gv.get(0, c);
                            dx.set(r, c, is * (d - mean_d - xh[c] * mean_dx));
                        }
                    }
                    acc(&mut node_grads[x.0], dx);
                    acc(&mut node_grads[gain.0], dgain);
                    acc(&mut node_grads[bias.0], dbias);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..g.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(&mut node_grads[a.0], d);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut node_grads[x.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(&mut node_grads[p.0], g.slice_cols(offset, w));
                        offset += w;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    smoothing,
                } => {
                    let upstream = g.get(0, 0);
                    let v = probs.cols() as f64;
                    let mut d = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..probs.cols() {
                            let mut target_p = smoothing / v;
                            if c == t {
                                target_p += 1.0 - smoothing;
                            }
                            d.set(r, c, upstream * (probs.get(r, c) - target_p));
                        }
                    }
                    acc(&mut node_grads[logits.0], d);
                }
                Op::SumScaled(parts, factor) => {
                    for p in parts {
                        acc(&mut node_grads[p.0], g.scaled(*factor));
                    }
                }
            }
        }
        Gradients { grads: params }
    }
}
