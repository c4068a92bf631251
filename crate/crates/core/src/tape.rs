//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Scalars are `1 x 1`. Binary
//! elementwise ops broadcast a dimension of size one against the other
//! operand, and the backward pass sums gradients back over broadcast axes.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::special::{digamma, ln_gamma, trigamma};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-normalised sparse aggregation matrix in compressed row form.
///
/// Row `i` holds `(column, weight)` pairs; `apply` computes `A · X`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseRows {
    /// Builds from per-row entry lists.
    pub fn from_rows(n_cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(c, w) in row {
                assert!(c < n_cols, "column {c} out of range {n_cols}");
                cols.push(c);
                weights.push(w);
            }
            offsets.push(cols.len());
        }
        Self {
            n_rows: rows.len(),
            n_cols,
            offsets,
            cols,
            weights,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.cols[a..b]
            .iter()
            .copied()
            .zip(self.weights[a..b].iter().copied())
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Mat {
        assert_eq!(x.nrows(), self.n_cols);
        let mut out = Mat::zeros((self.n_rows, x.ncols()));
        for i in 0..self.n_rows {
            let mut dst = out.row_mut(i);
            for (j, w) in self.row(i) {
                dst.scaled_add(w, &x.row(j));
            }
        }
        out
    }

    fn apply_transpose(&self, g: ArrayView2<f64>) -> Mat {
        let mut out = Mat::zeros((self.n_cols, g.ncols()));
        for i in 0..self.n_rows {
            let src = g.row(i);
            for (j, w) in self.row(i) {
                out.row_mut(j).scaled_add(w, &src);
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    LnGamma(Var),
    Digamma(Var),
    SumRows(Var),
    SumAll(Var),
    Mean(Var),
    MaxRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Option<Rc<Array2<bool>>>),
    ConcatCols(Vec<Var>),
    Interleave(Vec<Var>),
    GroupSum(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Aggregate(Rc<SparseRows>, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// A linear recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// `None` when the node does not depend on any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    let mut g = g;
    if g.nrows() != shape.0 {
        debug_assert_eq!(shape.0, 1);
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if g.ncols() != shape.1 {
        debug_assert_eq!(shape.1, 1);
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn zip_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let sh = broadcast_shape(shape(a), shape(b));
    let av = a.broadcast(sh).expect("broadcast lhs");
    let bv = b.broadcast(sh).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
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

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(shape(m), (1, 1));
        m[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    /// Attention probabilities recorded by [`Tape::attention`], laid out as
    /// `[block][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).mapv(f);
        self.push(v, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), silu)
    }

    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::LnGamma(a), ln_gamma)
    }

    pub fn digamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::Digamma(a), digamma)
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Row maxima as an `r x 1` column; ties go to the first column.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut arg = Vec::with_capacity(m.nrows());
        let mut out = Mat::zeros((m.nrows(), 1));
        for (i, row) in m.rows().into_iter().enumerate() {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            out[[i, 0]] = row[best];
            arg.push(best);
        }
        self.push(out, Op::MaxRows(a, arg), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise log-softmax. With a mask, only `true` entries take part in
    /// the normaliser; masked-out entries are set to zero and receive no
    /// gradient.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Rc<Array2<bool>>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(shape(x), m.dim());
        }
        let mut v = x.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[[i, j]]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if keep(j) {
                    mx = mx.max(x);
                }
            }
            let mut s = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if keep(j) {
                    s += (x - mx).exp();
                }
            }
            let lse = mx + s.ln();
            for (j, x) in row.iter_mut().enumerate() {
                *x = if keep(j) { *x - lse } else { 0.0 };
            }
        }
        self.push(v, Op::LogSoftmaxRows(a, mask), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks `M` equally shaped `n x d` blocks into an `(n·M) x d` matrix
    /// whose row `i·M + m` is row `i` of block `m`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Var {
        let m = parts.len();
        let (n, d) = self.shape(parts[0]);
        let mut out = Mat::zeros((n * m, d));
        for (k, &p) in parts.iter().enumerate() {
            let src = self.value(p);
            assert_eq!(shape(src), (n, d), "interleave block shapes differ");
            for i in 0..n {
                out.row_mut(i * m + k).assign(&src.row(i));
            }
        }
        self.push(out, Op::Interleave(parts.to_vec()), parts)
    }

    /// Sums each consecutive group of `group` rows.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows() % group, 0);
        let n = x.nrows() / group;
        let mut out = Mat::zeros((n, x.ncols()));
        for i in 0..n {
            let mut dst = out.row_mut(i);
            for k in 0..group {
                dst += &x.row(i * group + k);
            }
        }
        self.push(out, Op::GroupSum(a, group), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::Gather(a, idx.to_vec()), &[a])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols);
        let data: Vec<f64> = x.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), data).expect("reshape");
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn aggregate(&mut self, adj: Rc<SparseRows>, a: Var) -> Var {
        let v = adj.apply(self.value(a).view());
        self.push(v, Op::Aggregate(adj, a), &[a])
    }

    /// Scaled dot-product attention within blocks of `tokens` consecutive
    /// rows, split into `heads` column groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize, heads: usize) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(self.shape(k), (rows, d));
        assert_eq!(self.shape(v), (rows, d));
        assert_eq!(rows % tokens, 0);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let blocks = rows / tokens;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).as_standard_layout(), self.value(k).as_standard_layout(), self.value(v).as_standard_layout());
        let (qs, ks, vs) = (qv.as_slice().unwrap(), kv.as_slice().unwrap(), vv.as_slice().unwrap());
        let mut probs = vec![0.0; blocks * heads * tokens * tokens];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; tokens];
        for b in 0..blocks {
            let base = b * tokens;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..tokens {
                    let qi = &qs[(base + i) * d + col..][..dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        *sc = dot(qi, &ks[(base + j) * d + col..][..dh]) * scale;
                        mx = mx.max(*sc);
                    }
                    let mut total = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - mx).exp();
                        total += *sc;
                    }
                    let p_off = ((b * heads + h) * tokens + i) * tokens;
                    let oi = &mut out[(base + i) * d + col..][..dh];
                    for j in 0..tokens {
                        let p = scores[j] / total;
                        probs[p_off + j] = p;
                        axpy(p, &vs[(base + j) * d + col..][..dh], oi);
                    }
                }
            }
        }
        let out = Mat::from_shape_vec((rows, d), out).expect("attention output");
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mu = row.sum() / d;
            let var = row.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mu) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Back-propagates from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let out = &node.value;
            // operands that cannot reach a trainable leaf get no gradient
            let need = |v: Var| self.nodes[v.0].needs_grad;
            let acc = |v: Var, delta: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if need(*b) {
                        acc(*b, reduce_to(g.clone(), self.shape(*b)), &mut grads);
                    }
                    acc(*a, reduce_to(g, self.shape(*a)), &mut grads);
                }
                Op::Sub(a, b) => {
                    if need(*b) {
                        acc(*b, reduce_to(-&g, self.shape(*b)), &mut grads);
                    }
                    acc(*a, reduce_to(g, self.shape(*a)), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if need(*a) {
                        let ga = zip_broadcast(&g, bv, |x, y| x * y);
                        acc(*a, reduce_to(ga, shape(av)), &mut grads);
                    }
                    if need(*b) {
                        let gb = zip_broadcast(&g, av, |x, y| x * y);
                        acc(*b, reduce_to(gb, shape(bv)), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if need(*a) {
                        let ga = zip_broadcast(&g, bv, |x, y| x / y);
                        acc(*a, reduce_to(ga, self.shape(*a)), &mut grads);
                    }
                    if need(*b) {
                        let q = zip_broadcast(&g, out, |x, y| -x * y);
                        let gb = zip_broadcast(&q, bv, |x, y| x / y);
                        acc(*b, reduce_to(gb, shape(bv)), &mut grads);
                    }
                }
                Op::Scale(a, c) => acc(*a, g * *c, &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::MatMul(a, b) => {
                    if need(*a) {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if need(*b) {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if need(*a) {
                        acc(*a, g.dot(self.value(*b)), &mut grads);
                    }
                    if need(*b) {
                        acc(*b, g.t().dot(self.value(*a)), &mut grads);
                    }
                }
                Op::Exp(a) => acc(*a, g * out, &mut grads),
                Op::Ln(a) => acc(*a, g / self.value(*a), &mut grads),
                Op::Sqrt(a) => {
                    let d = Zip::from(&g).and(out).map_collect(|&g, &y| 0.5 * g / y);
                    acc(*a, d, &mut grads)
                }
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g).and(out).map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(*a, d, &mut grads)
                }
                Op::Softplus(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * sigmoid(x));
                    acc(*a, d, &mut grads)
                }
                Op::Silu(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * silu_grad(x));
                    acc(*a, d, &mut grads)
                }
                Op::LnGamma(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * digamma(x));
                    acc(*a, d, &mut grads)
                }
                Op::Digamma(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * trigamma(x));
                    acc(*a, d, &mut grads)
                }
                Op::SumRows(a) => {
                    let sh = self.shape(*a);
                    let d = g.broadcast(sh).expect("sum_rows grad").to_owned();
                    acc(*a, d, &mut grads)
                }
                Op::SumAll(a) => {
                    let d = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(*a, d, &mut grads)
                }
                Op::Mean(a) => {
                    let sh = self.shape(*a);
                    let d = Mat::from_elem(sh, g[[0, 0]] / (sh.0 * sh.1) as f64);
                    acc(*a, d, &mut grads)
                }
                Op::MaxRows(a, arg) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    for (i, &j) in arg.iter().enumerate() {
                        d[[i, j]] = g[[i, 0]];
                    }
                    acc(*a, d, &mut grads)
                }
                Op::SoftmaxRows(a) => {
                    let mut d = &g * out;
                    for (mut row, y) in d.rows_mut().into_iter().zip(out.rows()) {
                        let s = row.sum();
                        Zip::from(&mut row).and(&y).for_each(|r, &y| *r -= y * s);
                    }
                    acc(*a, d, &mut grads)
                }
                Op::LogSoftmaxRows(a, mask) => {
                    let mut d = g.clone();
                    for i in 0..d.nrows() {
                        let keep = |j: usize| mask.as_ref().is_none_or(|m| m[[i, j]]);
                        let mut s = 0.0;
                        for j in 0..d.ncols() {
                            if keep(j) {
                                s += g[[i, j]];
                            }
                        }
                        for j in 0..d.ncols() {
                            d[[i, j]] = if keep(j) {
                                g[[i, j]] - out[[i, j]].exp() * s
                            } else {
                                0.0
                            };
                        }
                    }
                    acc(*a, d, &mut grads)
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(p, g.slice(s![.., off..off + w]).to_owned(), &mut grads);
                        off += w;
                    }
                }
                Op::Interleave(parts) => {
                    let m = parts.len();
                    for (k, &p) in parts.iter().enumerate() {
                        let d = g.slice(s![k..;m, ..]).to_owned();
                        acc(p, d, &mut grads);
                    }
                }
                Op::GroupSum(a, group) => {
                    let sh = self.shape(*a);
                    let mut d = Mat::zeros(sh);
                    for r in 0..sh.0 {
                        d.row_mut(r).assign(&g.row(r / group));
                    }
                    acc(*a, d, &mut grads)
                }
                Op::Gather(a, idx) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(*a, d, &mut grads)
                }
                Op::Reshape(a) => {
                    let sh = self.shape(*a);
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(*a, Mat::from_shape_vec(sh, data).expect("reshape"), &mut grads)
                }
                Op::Aggregate(adj, a) => acc(*a, adj.apply_transpose(g.view()), &mut grads),
                Op::Attention {
                    q,
                    k,
                    v,
                    tokens,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *tokens, *heads, probs, &g);
                    acc(*q, gq, &mut grads);
                    acc(*k, gk, &mut grads);
                    acc(*v, gv, &mut grads);
                }
                Op::LayerNorm { x, inv_std } => {
                    let d = out.ncols() as f64;
                    let mut dx = Mat::zeros(out.dim());
                    for i in 0..out.nrows() {
                        let (gr, yr) = (g.row(i), out.row(i));
                        let sg = gr.sum();
                        let sgy = gr.dot(&yr);
                        for j in 0..out.ncols() {
                            dx[[i, j]] = inv_std[i] / d * (d * gr[j] - sg - yr[j] * sgy);
                        }
                    }
                    acc(*x, dx, &mut grads)
                }
            }
        }
        Gradients { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        probs: &[f64],
        g: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (rows, d) = self.shape(q);
        let (qv, kv, vv) = (self.value(q).as_standard_layout(), self.value(k).as_standard_layout(), self.value(v).as_standard_layout());
        let (qs, ks, vs) = (qv.as_slice().unwrap(), kv.as_slice().unwrap(), vv.as_slice().unwrap());
        let gm = g.as_standard_layout();
        let gs = gm.as_slice().unwrap();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; tokens];
        for b in 0..rows / tokens {
            let base = b * tokens;
            for h in 0..heads {
                let col = h * dh;
                let at = |r: usize| (base + r) * d + col;
                for i in 0..tokens {
                    let p_off = ((b * heads + h) * tokens + i) * tokens;
                    let p = &probs[p_off..p_off + tokens];
                    let gi = &gs[at(i)..][..dh];
                    let mut acc = 0.0;
                    for j in 0..tokens {
                        dp[j] = dot(gi, &vs[at(j)..][..dh]);
                        acc += dp[j] * p[j];
                        axpy(p[j], gi, &mut gv[at(j)..][..dh]);
                    }
                    for j in 0..tokens {
                        let ds = p[j] * (dp[j] - acc) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(ds, &ks[at(j)..][..dh], &mut gq[at(i)..][..dh]);
                        axpy(ds, &qs[at(i)..][..dh], &mut gk[at(j)..][..dh]);
                    }
                }
            }
        }
        let mat = |v: Vec<f64>| Mat::from_shape_vec((rows, d), v).expect("attention grad");
        (mat(gq), mat(gk), mat(gv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
    }

    /// Central-difference check of `build` with respect to every input.
    fn check(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| t.param(m.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out);
        let h = 1e-6;
        for (k, base) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(base.dim()));
            for idx in 0..base.len() {
                let eval = |delta: f64| {
                    let mut shifted: Vec<Mat> = inputs.to_vec();
                    let cell = shifted[k].iter_mut().nth(idx).unwrap();
                    *cell += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = shifted.into_iter().map(|m| t.constant(m)).collect();
                    let o = build(&mut t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = *analytic.iter().nth(idx).unwrap();
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} cell {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn broadcasting_arithmetic_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4, -1.0, 1.0);
        let row = random(&mut rng, 1, 4, 0.5, 2.0);
        let col = random(&mut rng, 3, 1, 0.5, 2.0);
        check(&[a, row, col], |t, v| {
            let x = t.add(v[0], v[1]);
            let y = t.mul(x, v[2]);
            let z = t.div(y, v[1]);
            let w = t.sub(z, v[2]);
            let w = t.mul(w, w);
            t.sum(w)
        });
    }

    #[test]
    fn matmul_and_nonlinearity_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 5, -1.0, 1.0);
        let b = random(&mut rng, 5, 2, -1.0, 1.0);
        let c = random(&mut rng, 4, 5, -1.0, 1.0);
        check(&[a, b, c], |t, v| {
            let x = t.matmul(v[0], v[1]);
            let x = t.silu(x);
            let y = t.matmul_t(v[0], v[2]);
            let y = t.softplus(y);
            let y = t.sigmoid(y);
            let sx = t.sum(x);
            let sy = t.mean(y);
            t.add(sx, sy)
        });
    }

    #[test]
    fn special_function_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 2, 3, 0.3, 6.0);
        check(&[a], |t, v| {
            let x = t.ln_gamma(v[0]);
            let y = t.digamma(v[0]);
            let z = t.mul(x, y);
            let e = t.exp(v[0]);
            let e = t.ln(e);
            let r = t.sqrt(e);
            let s = t.add(z, r);
            t.sum(s)
        });
    }

    #[test]
    fn row_reduction_and_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 4, 3, -2.0, 2.0);
        let w = random(&mut rng, 4, 3, -1.0, 1.0);
        let mask = Rc::new(Array2::from_shape_fn((4, 3), |(i, j)| i != j));
        check(&[a, w], move |t, v| {
            let p = t.softmax_rows(v[0]);
            let p = t.mul(p, v[1]);
            let lp = t.log_softmax_rows(v[0], Some(mask.clone()));
            let lp = t.mul(lp, v[1]);
            let l2 = t.log_softmax_rows(v[1], None);
            let mx = t.max_rows(v[0]);
            let sr = t.sum_rows(lp);
            let terms = [t.sum(p), t.sum(sr), t.sum(mx), t.sum(l2)];
            let a = t.add(terms[0], terms[1]);
            let b = t.add(terms[2], terms[3]);
            t.add(a, b)
        });
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 2, -1.0, 1.0);
        let b = random(&mut rng, 3, 2, -1.0, 1.0);
        let w = random(&mut rng, 6, 5, -1.0, 1.0);
        let adj = Rc::new(SparseRows::from_rows(
            6,
            &[
                vec![(0, 0.5), (3, 0.5)],
                vec![(1, 1.0)],
                vec![(2, 0.25), (4, 0.75)],
                vec![(5, 1.0)],
            ],
        ));
        check(&[a, b, w], move |t, v| {
            let inter = t.interleave_rows(&[v[0], v[1]]);
            let cat = t.concat_cols(&[inter, inter]);
            let cat = t.concat_cols(&[cat, v[2]]);
            let cat = t.mul(cat, cat);
            let g = t.group_sum_rows(cat, 2);
            let sel = t.gather_rows(cat, &[5, 0, 0, 2]);
            let agg = t.aggregate(adj.clone(), cat);
            let agg = t.mul(agg, sel);
            let r = t.reshape(g, 9, 3);
            let r = t.silu(r);
            let x = t.sum(r);
            let y = t.sum(agg);
            t.add(x, y)
        });
    }

    #[test]
    fn attention_and_layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&mut rng, 6, 4, -1.0, 1.0);
        let k = random(&mut rng, 6, 4, -1.0, 1.0);
        let v = random(&mut rng, 6, 4, -1.0, 1.0);
        let w = random(&mut rng, 6, 4, -1.0, 1.0);
        check(&[q, k, v, w], |t, x| {
            let a = t.attention(x[0], x[1], x[2], 3, 2);
            let n = t.layer_norm(a, 1e-5);
            let n = t.mul(n, x[3]);
            t.sum(n)
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let q = t.constant(random(&mut rng, 8, 6, -3.0, 3.0));
        let k = t.constant(random(&mut rng, 8, 6, -3.0, 3.0));
        let v = t.constant(random(&mut rng, 8, 6, -3.0, 3.0));
        let a = t.attention(q, k, v, 4, 3);
        let probs = t.attention_probs(a).unwrap();
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let m = t.mul(c, p);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![[1.0, 2.0]]);
    }
}
