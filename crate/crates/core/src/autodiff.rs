//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in execution order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{check_shape, gemm, Scalar, Tensor};

/// Fill value for masked attention logits. Finite on purpose: every node
/// value must stay finite.
const MASK_VALUE: f64 = -1.0e9;
const LAYER_NORM_EPS: f64 = 1.0e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Affine(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CausalMask(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    /// Persistent accumulators for leaves, indexed like `nodes`.
    grads: Vec<Option<Vec<T>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

/// `small` broadcasts over `big` when it equals `big` or is a suffix of it.
fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let t = (c * (x + k * x3)).tanh();
    let y = half * x * (one + t);
    let dt = (one - t * t) * c * (one + T::lit(3.0) * k * x * x);
    let dy = half * (one + t) + half * x * dt;
    (y, dy)
}

fn add_into<T: Scalar>(acc: &mut Option<Vec<T>>, g: Vec<T>) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *acc = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Copies a tensor into the graph as a leaf, honouring its `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.checked_leaf(shape, data, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.checked_leaf(shape, data, false)
    }

    fn checked_leaf(&mut self, shape: Vec<usize>, data: Vec<T>, grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::NumericOverflow { op: "leaf" });
        }
        let shape = t.shape().to_vec();
        Ok(self.push_leaf(shape, t.into_data(), grad))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { op: name });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Affine(x, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::CausalMask(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, .. }
            | Op::Pick { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatCols(xs) => xs.clone(),
        }
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, value, op)
    }

    // ---- primitives ------------------------------------------------------

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(Error::shape(name, format!("{sa:?} with {sb:?}")));
        }
        let shape = sa.to_vec();
        let (va, vb) = (self.value(a), self.value(b));
        let value = va
            .iter()
            .zip(vb.iter().cycle())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(name, shape, value, op)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, |v| v.ln(), Op::Log(x))
    }

    /// `a·x + b`
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Result<Var> {
        self.map("affine", x, |v| a * v + b, Op::Affine(x, a))
    }

    pub fn scale(&mut self, x: Var, a: T) -> Result<Var> {
        self.affine(x, a, T::zero())
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, cols) = rows_cols(&shape);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    /// Log-softmax over the last axis via max-subtracted log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, cols) = rows_cols(&shape);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln();
            row.iter_mut().for_each(|v| *v = (*v - max) - log_z);
        }
        self.push("log_softmax", shape, out, Op::LogSoftmax(x))
    }

    /// Normalises each row over the last axis to zero mean and unit variance.
    /// Scale and offset are applied separately with [`Graph::mul`] / [`Graph::add`].
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let n = T::lit(cols as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut out = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push("layer_norm", shape, out, Op::LayerNorm { x, inv_std })
    }

    /// Rows of a `[v,d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 || ids.is_empty() {
            return Err(Error::shape("gather", format!("table {shape:?}, {} ids", ids.len())));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather", format!("row {bad} of {v}")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push("gather", vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// `out[i] = x[i, ids[i]]` for a `[m,n]` input.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != ids.len() || ids.iter().any(|&i| i >= shape[1]) {
            return Err(Error::shape("pick", format!("{shape:?} with {} ids", ids.len())));
        }
        let n = shape[1];
        let src = self.value(x);
        let out = ids.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        self.push("pick", vec![ids.len()], out, Op::Pick { x, ids: ids.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} → {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", shape, value, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::shape("transpose", format!("{shape:?} is not a matrix")));
        }
        let (m, n) = (shape[0], shape[1]);
        let out = transpose_buf(self.value(x), m, n);
        self.push("transpose", vec![n, m], out, Op::Transpose(x))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || len == 0 || start + len > shape[1] {
            return Err(Error::shape("slice_cols", format!("{shape:?}[.., {start}..{}]", start + len)));
        }
        let (m, n) = (shape[0], shape[1]);
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push("slice_cols", vec![m, len], out, Op::SliceCols { x, start })
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || len == 0 || start + len > shape[0] {
            return Err(Error::shape("slice_rows", format!("{shape:?}[{start}..{}, ..]", start + len)));
        }
        let n = shape[1];
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        self.push("slice_rows", vec![len, n], out, Op::SliceRows { x, start })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let m = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != m {
                return Err(Error::shape("concat_cols", format!("{s:?} against {m} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        self.push("concat_cols", vec![m, total], out, Op::ConcatCols(xs.to_vec()))
    }

    /// Replaces entries above the diagonal of a square matrix with a large
    /// negative constant so that a following softmax ignores them.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape("causal_mask", format!("{shape:?} is not square")));
        }
        let n = shape[0];
        let mut out = self.value(x).to_vec();
        let fill = T::lit(MASK_VALUE);
        for i in 0..n {
            out[i * n + i + 1..(i + 1) * n].iter_mut().for_each(|v| *v = fill);
        }
        self.push("causal_mask", vec![n, n], out, Op::CausalMask(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push("mean", vec![1], vec![s], Op::Mean(x))
    }

    /// Composite: `a - b` for same-shape inputs.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `∂root/∂leaf` into every gradient-requiring leaf reachable
    /// from `root`. Repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { op: "backward" });
            }
            if let Op::Leaf = self.nodes[i].op {
                add_into(&mut self.grads[i], g);
                continue;
            }
            for (input, contrib) in self.vjp(i, &g) {
                if self.nodes[input.0].requires_grad {
                    add_into(&mut adj[input.0], contrib);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut out = Vec::new();
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, self.value(*b), true, &mut da, false);
                    out.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a), true, g, false, &mut db, false);
                    out.push((*b, db));
                }
                out
            }
            Op::Add(a, b) => {
                let nb = self.value(*b).len();
                vec![(*a, g.to_vec()), (*b, reduce_leading(g, nb))]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.iter().zip(vb.iter().cycle()).map(|(&g, &b)| g * b).collect();
                let prod: Vec<T> = g.iter().zip(va).map(|(&g, &a)| g * a).collect();
                vec![(*a, da), (*b, reduce_leading(&prod, vb.len()))]
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                vec![(*x, g.iter().zip(vx).map(|(&g, &v)| g * gelu_parts(v).1).collect())]
            }
            Op::Exp(x) => vec![(*x, g.iter().zip(y).map(|(&g, &y)| g * y).collect())],
            Op::Log(x) => {
                let vx = self.value(*x);
                vec![(*x, g.iter().zip(vx).map(|(&g, &v)| g / v).collect())]
            }
            Op::Affine(x, a) => vec![(*x, g.iter().map(|&g| g * *a).collect())],
            Op::Softmax(x) => {
                let (_, cols) = rows_cols(&node.shape);
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax(x) => {
                let (_, cols) = rows_cols(&node.shape);
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                    let total: T = gr.iter().copied().sum();
                    dx.extend(gr.iter().zip(yr).map(|(&g, &ly)| g - ly.exp() * total));
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, inv_std } => {
                let (_, cols) = rows_cols(&node.shape);
                let n = T::lit(cols as f64);
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), &inv) in g.chunks(cols).zip(y.chunks(cols)).zip(inv_std) {
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    dx.extend(gr.iter().zip(yr).map(|(&g, &y)| inv * (g - mg - y * mgy)));
                }
                vec![(*x, dx)]
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a = *a + b);
                }
                vec![(*table, dt)]
            }
            Op::Pick { x, ids } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &c) in ids.iter().enumerate() {
                    dx[r * n + c] = g[r];
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Transpose(x) => {
                let s = self.shape(*x);
                vec![(*x, transpose_buf(g, s[1], s[0]))]
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                let len = node.shape[1];
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*x, dx)]
            }
            Op::SliceRows { x, start } => {
                let n = node.shape[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::ConcatCols(xs) => {
                let (m, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let w = self.shape(x)[1];
                    let mut dx = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    out.push((x, dx));
                }
                out
            }
            Op::CausalMask(x) => {
                let n = node.shape[0];
                let mut dx = g.to_vec();
                for i in 0..n {
                    dx[i * n + i + 1..(i + 1) * n].iter_mut().for_each(|v| *v = T::zero());
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / T::lit(n as f64); n])]
            }
        }
    }
}

fn transpose_buf<T: Scalar>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = src[r * n + c];
        }
    }
    out
}

/// Sums `g` over leading axes down to its trailing `n` elements.
fn reduce_leading<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
    }
    out
}

/// A scalar function of tensors that can be evaluated at any precision.
///
/// Gradient checks evaluate the analytic side at the caller's precision and
/// the finite-difference side in `f64`.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

/// Analytic gradients of `f` at `point`, one buffer per input tensor.
pub fn analytic_gradient<T: Scalar, F: ScalarFn>(f: &F, point: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| g.param(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let root = f.eval(&mut g, &vars)?;
    g.backward(root)?;
    Ok(vars
        .iter()
        .zip(point)
        .map(|(&v, t)| g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.len()]))
        .collect())
}

pub fn eval_f64<F: ScalarFn>(f: &F, point: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| g.constant(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let root = f.eval(&mut g, &vars)?;
    Ok(g.scalar_value(root))
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every coordinate, in `f64`.
pub fn numeric_gradient<T: Scalar, F: ScalarFn>(f: &F, point: &[Tensor<T>], step: f64) -> Result<Vec<Vec<f64>>> {
    let mut work: Vec<Tensor<f64>> = point.iter().map(Tensor::cast).collect();
    let mut out = Vec::with_capacity(work.len());
    for t in 0..work.len() {
        let mut grad = Vec::with_capacity(work[t].len());
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval_f64(f, &work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval_f64(f, &work)?;
            work[t].data_mut()[i] = orig;
            grad.push((plus - minus) / (2.0 * step));
        }
        out.push(grad);
    }
    Ok(out)
}

/// `max |a − n| / max(1, |a|, |n|)` over all coordinates.
pub fn max_relative_error<T: Scalar>(analytic: &[Vec<T>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| {
            let a = a.as_f64();
            (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
        })
        .fold(0.0, f64::max)
}

/// Worst relative disagreement between backpropagated and finite-difference
/// gradients of `f` at `point`.
pub fn grad_check<T: Scalar, F: ScalarFn>(f: &F, point: &[Tensor<T>], step: f64) -> Result<f64> {
    let analytic = analytic_gradient(f, point)?;
    let numeric = numeric_gradient(f, point, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Default finite-difference step for a precision.
pub fn default_step<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-3
    } else {
        1e-5
    }
}
