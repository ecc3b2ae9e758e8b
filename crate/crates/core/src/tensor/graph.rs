use std::collections::HashMap;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamKey;
use crate::scalar::Real;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MulCols(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of operations. Nodes are stored in creation order,
/// which is a topological order because every op only refers to
/// existing nodes.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<ParamKey, Var>,
    bound: Vec<(ParamKey, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Snapshot of a node as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a gradient-tracking leaf.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Binds a named parameter, reusing the existing node when the same key
    /// is bound twice so that shared weights accumulate gradient once.
    pub fn bind(&mut self, key: ParamKey, t: &Tensor<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad);
        self.bindings.insert(key, v);
        self.bound.push((key, v));
        v
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> &[(ParamKey, Var)] {
        &self.bound
    }

    pub fn binding(&self, key: ParamKey) -> Option<Var> {
        self.bindings.get(&key).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose (`a: m×k`, `b: n×k`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.value(a);
        let out = (0..r * c).map(|i| src[(i % r) * c + i / r]).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|x| *x + c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddScalar(a), rg)
    }

    /// `x[i, j] + bias[j]` for `x: m×n`, `bias: [n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let (xv, bv) = (self.value(x), self.value(bias));
        let out = (0..m * n).map(|i| xv[i] + bv[i % n]).collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![m, n], out, Op::AddBias(x, bias), rg))
    }

    /// `x[i, j] * e[j]`: right-multiplication by `diag(e)`.
    pub fn mul_cols(&mut self, x: Var, e: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(e) != [n] {
            return Err(shape_err("mul_cols", self.shape(x), self.shape(e)));
        }
        let (xv, ev) = (self.value(x), self.value(e));
        let out = (0..m * n).map(|i| xv[i] * ev[i % n]).collect();
        let rg = self.rg(x) || self.rg(e);
        Ok(self.push(vec![m, n], out, Op::MulCols(x, e), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.value(a);
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows received NaN input".into()));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = T::zero();
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (*v - max).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(a), rg))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::Shape(format!(
                "layer_norm needs a last dimension > 1, got shape {shape:?}"
            )));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).len() / d;
        let dt = T::from_usize_lossy(d);
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| gelu_parts(*x).0).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu(a), rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for logits of shape {:?}",
                labels.len(),
                self.shape(logits)
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} outside [0, {c})")));
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss = loss + (lse - row[labels[i]]);
        }
        loss = loss / T::from_usize_lossy(b);
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len());
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Column means of an `m×n` matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.value(a);
        let mt = T::from_usize_lossy(m);
        let out = (0..n)
            .map(|j| (0..m).map(|i| src[i * n + j]).sum::<T>() / mt)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(vec![1, n], out, Op::MeanRows(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of range for shape {:?}",
                start + len,
                self.shape(a)
            )));
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len, n], out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of range for shape {:?}",
                start + len,
                self.shape(a)
            )));
        }
        let src = self.value(a);
        let out = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(vec![m, len], out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let n = self.dims2(first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let m = self.dims2(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Shape("gather_rows with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row id {bad} outside table of {v} rows")));
        }
        let src = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Accumulator for an input, or None when the input needs no gradient.
        fn slot<'a, T: Real>(
            graph: &Graph<T>,
            grads: &'a mut [Option<Vec<T>>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            if !graph.nodes[v.0].requires_grad {
                return None;
            }
            let len = graph.nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if let Some(ga) = slot(self, grads, *a) {
                    matmul_nt(g, self.value(*b), m, n, k, ga);
                }
                if let Some(gb) = slot(self, grads, *b) {
                    matmul_tn(self.value(*a), g, m, k, n, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if let Some(ga) = slot(self, grads, *a) {
                    matmul_nn(g, self.value(*b), m, n, k, ga);
                }
                if let Some(gb) = slot(self, grads, *b) {
                    matmul_tn(g, self.value(*a), m, n, k, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if let Some(ga) = slot(self, grads, *a) {
                    // node is c×r; ga is r×c
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(self, grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(self, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(self, grads, *b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d = *d - *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = slot(self, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if let Some(gb) = slot(self, grads, *b) {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(self, grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d = *d + *s * *c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot(self, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.nodes[bias.0].value.len();
                if let Some(gx) = slot(self, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(self, grads, *bias) {
                    for (i, s) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + *s;
                    }
                }
            }
            Op::MulCols(x, e) => {
                let n = self.nodes[e.0].value.len();
                let (xv, ev) = (self.value(*x), self.value(*e));
                if let Some(gx) = slot(self, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * ev[i % n];
                    }
                }
                if let Some(ge) = slot(self, grads, *e) {
                    for i in 0..g.len() {
                        ge[i % n] = ge[i % n] + g[i] * xv[i];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.shape[1];
                let y = &node.value;
                if let Some(ga) = slot(self, grads, *a) {
                    for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                        for j in 0..n {
                            ga[r * n + j] = ga[r * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[gamma.0].value.len();
                let dt = T::from_usize_lossy(d);
                if let Some(gb) = slot(self, grads, *beta) {
                    for (i, s) in g.iter().enumerate() {
                        gb[i % d] = gb[i % d] + *s;
                    }
                }
                if let Some(gg) = slot(self, grads, *gamma) {
                    for (i, s) in g.iter().enumerate() {
                        gg[i % d] = gg[i % d] + *s * xhat[i];
                    }
                }
                let gv = self.value(*gamma).to_vec();
                if let Some(gx) = slot(self, grads, *x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let base = r * d;
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..d {
                            let gh = g[base + j] * gv[j];
                            mean_g = mean_g + gh;
                            mean_gx = mean_gx + gh * xhat[base + j];
                        }
                        mean_g = mean_g / dt;
                        mean_gx = mean_gx / dt;
                        for j in 0..d {
                            let gh = g[base + j] * gv[j];
                            gx[base + j] =
                                gx[base + j] + *is * (gh - mean_g - xhat[base + j] * mean_gx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = slot(self, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * gelu_parts(av[i]).1;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / T::from_usize_lossy(b);
                if let Some(gl) = slot(self, grads, *logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[i * c + j] = gl[i * c + j] + scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(self, grads, *a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize_lossy(self.nodes[a.0].value.len());
                if let Some(ga) = slot(self, grads, *a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0] / n;
                    }
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let mt = T::from_usize_lossy(m);
                if let Some(ga) = slot(self, grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j] / mt;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.nodes[a.0].shape[1];
                if let Some(ga) = slot(self, grads, *a) {
                    add_into(&mut ga[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.nodes[a.0].shape[1];
                let len = node.shape[1];
                if let Some(ga) = slot(self, grads, *a) {
                    for (i, gr) in g.chunks(len).enumerate() {
                        add_into(&mut ga[i * n + start..i * n + start + len], gr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = slot(self, grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if let Some(gp) = slot(self, grads, p) {
                        for (i, dst) in gp.chunks_mut(w).enumerate() {
                            add_into(dst, &g[i * n + offset..i * n + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let d = self.nodes[table.0].shape[1];
                if let Some(gt) = slot(self, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}
