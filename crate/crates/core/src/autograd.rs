//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! value. Parameters are referenced from a borrowed [`ParamStore`] rather than
//! copied. [`Graph::backward`] walks the tape in reverse, seeding the output
//! with a caller-provided gradient so that batch-coupled losses can be
//! computed outside the graph.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-6;

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, F),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<F>,
        rstd: Vec<F>,
    },
    SoftmaxRows(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    MeanRows(NodeId),
    MaxRows(NodeId, Vec<usize>),
    SumAll(NodeId),
}

struct Node<F> {
    op: Op<F>,
    value: Option<Tensor<F>>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Real> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
}

/// Result of a backward pass.
pub struct Gradients<F> {
    pub params: ParamGrads<F>,
    nodes: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to an arbitrary node (only populated for nodes
    /// that required a gradient).
    pub fn node(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.nodes[id.0].as_ref()
    }
}

pub fn gelu<F: Real>(x: F) -> F {
    let x = x.as_f64();
    F::from_f64(0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
}

fn gelu_grad<F: Real>(x: F) -> F {
    let x = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    F::from_f64(cdf + x * pdf)
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.store.get(*p),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<F>) -> NodeId {
        self.push(Op::Input, t, false)
    }

    /// Input whose gradient is tracked (used for sensitivity tests).
    pub fn input_with_grad(&mut self, t: Tensor<F>) -> NodeId {
        self.push(Op::Input, t, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(Op::Transpose(a), v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    /// `a + 1ᵀ·row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for chunk in v.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), v, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(Op::Gelu(a), v, ng)
    }

    /// Row-wise layer normalization with learnable `1×c` scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, cols), "layer_norm gamma shape");
        assert_eq!(b.shape(), (1, cols), "layer_norm beta shape");
        let n = F::from_usize(cols);
        let eps = F::from_f64(LN_EPS);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            out,
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for row in v.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let v = Tensor::from_fn(src.rows(), len, |r, c| src.get(r, start + c));
        let ng = self.ng(a);
        self.push(Op::SliceCols(a, start), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let v = Tensor::from_vec(rows, cols, data).expect("concat_rows size");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), v, ng)
    }

    /// Row gather; indices may repeat (gradients are scatter-added).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(Op::GatherRows(a, idx.to_vec()), v, ng)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = src.sum_rows();
        v.scale_inplace(F::one() / F::from_usize(src.rows()));
        let ng = self.ng(a);
        self.push(Op::MeanRows(a), v, ng)
    }

    /// Column-wise maximum over rows; ties resolve to the lowest row index.
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = Tensor::row_vector(src.row(0));
        let mut arg = vec![0usize; src.cols()];
        for r in 1..src.rows() {
            for (c, &x) in src.row(r).iter().enumerate() {
                if x > v.get(0, c) {
                    v.set(0, c, x);
                    arg[c] = r;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Op::MaxRows(a, arg), v, ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::SumAll(a), v, ng)
    }

    /// `x·W + b` for parameters `W` (`in×out`) and `b` (`1×out`).
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Reverse pass from `root` with the given seed gradient (same shape as
    /// the root value).
    pub fn backward(&self, root: NodeId, seed: Tensor<F>) -> Gradients<F> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut params = ParamGrads::new(self.store.len());
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => params.accumulate(*p, g.clone()),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(&mut grads, *row, g.sum_rows());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |gy, x| gy * gelu_grad(x));
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.ng(*gamma) {
                        let dg = g.zip_map(xhat, |a, b| a * b).sum_rows();
                        acc(&mut grads, *gamma, dg);
                    }
                    if self.ng(*beta) {
                        acc(&mut grads, *beta, g.sum_rows());
                    }
                    if self.ng(*x) {
                        let gv = self.value(*gamma);
                        let (rows, cols) = g.shape();
                        let n = F::from_usize(cols);
                        let mut dx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let gr = g.row(r);
                            let hr = xhat.row(r);
                            let mut mean_d = F::zero();
                            let mut mean_dh = F::zero();
                            for c in 0..cols {
                                let d = gr[c] * gv.get(0, c);
                                mean_d += d;
                                mean_dh += d * hr[c];
                            }
                            mean_d /= n;
                            mean_dh /= n;
                            let out = dx.row_mut(r);
                            for c in 0..cols {
                                let d = gr[c] * gv.get(0, c);
                                out[c] = rstd[r] * (d - mean_d - hr[c] * mean_dh);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let cols = y.cols();
                    let mut dx = Tensor::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            let d = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                            acc(&mut grads, p, d);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        if self.ng(p) {
                            let idx: Vec<usize> = (off..off + h).collect();
                            acc(&mut grads, p, g.select_rows(&idx));
                        }
                        off += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut dx = Tensor::zeros(rows, cols);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, &v) in dx.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let inv = F::one() / F::from_usize(rows);
                    let dx = Tensor::from_fn(rows, cols, |_, c| g.get(0, c) * inv);
                    acc(&mut grads, *a, dx);
                }
                Op::MaxRows(a, arg) => {
                    let (rows, cols) = self.shape(*a);
                    let mut dx = Tensor::zeros(rows, cols);
                    for (c, &r) in arg.iter().enumerate() {
                        dx.set(r, c, g.get(0, c));
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(rows, cols, g.get(0, 0)));
                }
            }
            if matches!(node.op, Op::Input) {
                grads[i] = Some(g);
            }
        }
        Gradients {
            params,
            nodes: grads,
        }
    }
}

fn acc<F: Real>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
