use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{gradient_fault, sigmoid, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    RowScale(Var, Vec<f32>),
    SliceCols {
        input: Var,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        probs: Vec<f32>,
        targets: Vec<usize>,
        weights: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Single-use recording of primitive operations in topological order.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// Leaves created with [`Graph::param`] are tracked; [`Graph::constant`]
/// leaves are not, and nodes derived only from constants are not tracked
/// either.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node {} does not belong to this graph",
                v.index
            )));
        }
        Ok(&self.nodes[v.index])
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.graph, self.id);
        &self.nodes[v.index]
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.check(a)?.value.matmul(&self.check(b)?.value)?;
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        let f = |x: f32, y: f32| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            av.map(|x| f(x, y))
        } else if av.is_scalar() {
            let x = av.data()[0];
            bv.map(|y| f(x, y))
        } else {
            return Err(Error::Dimension(format!(
                "elementwise {:?} on incompatible shapes {:?} and {:?}",
                kind,
                av.shape(),
                bv.shape()
            )));
        };
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(value, Op::Binary(kind, a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let av = &self.check(a)?.value;
        let value = match kind {
            Unary::Sigmoid => av.map(sigmoid),
            Unary::Tanh => av.map(f32::tanh),
            Unary::Relu => av.map(|x| x.max(0.0)),
        };
        let tracked = self.node(a).tracked;
        Ok(self.push(value, Op::Unary(kind, a), tracked))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let value = self.check(a)?.value.map(|x| x * s);
        let tracked = self.node(a).tracked;
        Ok(self.push(value, Op::Scale(a, s), tracked))
    }

    /// Adds the vector `row` (length n) to every row of the `m×n` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check(a)?.value.dims2()?;
        let rv = &self.check(row)?.value;
        if rv.len() != n {
            return Err(Error::Dimension(format!(
                "row broadcast of length {} onto matrix {:?}",
                rv.len(),
                [m, n]
            )));
        }
        let mut data = self.node(a).value.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let tracked = self.node(a).tracked || self.node(row).tracked;
        Ok(self.push(value, Op::AddRow(a, row), tracked))
    }

    /// Multiplies row `i` of `a` by the constant `weights[i]`.
    pub fn row_scale(&mut self, a: Var, weights: &[f32]) -> Result<Var> {
        let (m, n) = self.check(a)?.value.dims2()?;
        if weights.len() != m {
            return Err(Error::Dimension(format!(
                "{} row weights for matrix {:?}",
                weights.len(),
                [m, n]
            )));
        }
        let mut data = self.node(a).value.data().to_vec();
        for (chunk, &w) in data.chunks_mut(n.max(1)).zip(weights) {
            chunk.iter_mut().for_each(|x| *x *= w);
        }
        let value = Tensor::new(vec![m, n], data)?;
        let tracked = self.node(a).tracked;
        Ok(self.push(value, Op::RowScale(a, weights.to_vec()), tracked))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.check(a)?.value.dims2()?;
        if start + width > n {
            return Err(Error::Dimension(format!(
                "column slice {}..{} of matrix {:?}",
                start,
                start + width,
                [m, n]
            )));
        }
        let src = self.node(a).value.data();
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let value = Tensor::new(vec![m, width], data)?;
        let tracked = self.node(a).tracked;
        Ok(self.push(
            value,
            Op::SliceCols {
                input: a,
                start,
                width,
            },
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero matrices".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.check(p)?.value.dims2()?);
        }
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::Dimension(format!(
                "concat of matrices with differing row counts {dims:?}"
            )));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &(_, n)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.node(p).value.data()[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let tracked = parts.iter().any(|&p| self.node(p).tracked);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.check(a)?.value.sum() as f32;
        let tracked = self.node(a).tracked;
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), tracked))
    }

    /// `Σ_i weights[i] · CE(softmax(logits_i), targets[i])` as a scalar.
    ///
    /// Rows with weight zero contribute nothing to the value or the gradient,
    /// and their target is ignored.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        let (m, k) = self.check(logits)?.value.dims2()?;
        if targets.len() != m || weights.len() != m {
            return Err(Error::Dimension(format!(
                "{} targets / {} weights for logits {:?}",
                targets.len(),
                weights.len(),
                [m, k]
            )));
        }
        let z = self.node(logits).value.data();
        let mut probs = vec![0.0f32; m * k];
        let mut total = 0.0f64;
        for i in 0..m {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&x| f64::from(x - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (f64::from(row[j] - max).exp() / denom) as f32;
            }
            if weights[i] != 0.0 {
                if targets[i] >= k {
                    return Err(Error::Contract(format!(
                        "target class {} out of range for {} classes",
                        targets[i], k
                    )));
                }
                let log_p = f64::from(row[targets[i]] - max) - denom.ln();
                total -= f64::from(weights[i]) * log_p;
            }
        }
        let tracked = self.node(logits).tracked;
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a single-element output.
    ///
    /// Returns gradients for every tracked node, including interior ones.
    /// Tracked nodes the output does not depend on get zero gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        if !out.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a single-element output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if out.tracked {
            grads[output.index] = Some(vec![1.0]);
        }
        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let tracked: Vec<bool> = self.nodes.iter().map(|n| n.tracked).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                node.tracked.then(|| {
                    let shape = node.value.shape().to_vec();
                    match g {
                        Some(data) => Tensor { shape, data },
                        None => Tensor::zeros(&shape),
                    }
                })
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
            tracked,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], target: Var, f: impl FnOnce(&mut [f32])) {
        let node = self.node(target);
        if !node.tracked {
            return;
        }
        let slot = grads[target.index].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.node(*a).value.dims2().expect("matmul operand");
                let n = self.node(*b).value.shape()[1];
                let bv = self.node(*b).value.data();
                self.accumulate(grads, *a, |da| kernels::matmul_grad_a(g, bv, m, k, n, da));
                let av = self.node(*a).value.data();
                self.accumulate(grads, *b, |db| kernels::matmul_grad_b(av, g, m, k, n, db));
            }
            Op::Binary(kind, a, b) => {
                let av = self.node(*a).value.data();
                let bv = self.node(*b).value.data();
                let a_full = av.len() == g.len();
                let b_full = bv.len() == g.len();
                let at = |v: &[f32], full: bool, i: usize| if full { v[i] } else { v[0] };
                let da: Vec<f32> = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => (0..g.len()).map(|i| g[i] * at(bv, b_full, i)).collect(),
                };
                let db: Vec<f32> = match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|x| -x).collect(),
                    Binary::Mul => (0..g.len()).map(|i| g[i] * at(av, a_full, i)).collect(),
                };
                for (target, full, d) in [(*a, a_full, da), (*b, b_full, db)] {
                    self.accumulate(grads, target, |slot| {
                        if full {
                            slot.iter_mut().zip(&d).for_each(|(s, x)| *s += x);
                        } else {
                            slot[0] += d.iter().map(|&x| f64::from(x)).sum::<f64>() as f32;
                        }
                    });
                }
            }
            Op::Unary(kind, a) => {
                let y = node.value.data();
                let x = self.node(*a).value.data();
                let fault = matches!(kind, Unary::Tanh) && gradient_fault();
                self.accumulate(grads, *a, |da| {
                    for i in 0..g.len() {
                        let local = match kind {
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Tanh if fault => 1.5 * (1.0 - y[i] * y[i]),
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        da[i] += g[i] * local;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |da| kernels::axpy(*s, g, da));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |da| kernels::axpy(1.0, g, da));
                let n = self.node(*row).value.len();
                self.accumulate(grads, *row, |dr| {
                    let mut acc = vec![0.0f64; n];
                    for chunk in g.chunks(n.max(1)) {
                        for (s, &x) in acc.iter_mut().zip(chunk) {
                            *s += f64::from(x);
                        }
                    }
                    dr.iter_mut().zip(acc).for_each(|(d, s)| *d += s as f32);
                });
            }
            Op::RowScale(a, weights) => {
                let n = g.len() / weights.len().max(1);
                self.accumulate(grads, *a, |da| {
                    for (i, &w) in weights.iter().enumerate() {
                        kernels::axpy(w, &g[i * n..(i + 1) * n], &mut da[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::SliceCols {
                input,
                start,
                width,
            } => {
                let n = self.node(*input).value.shape()[1];
                let m = g.len() / (*width).max(1);
                self.accumulate(grads, *input, |da| {
                    for i in 0..m {
                        let dst = &mut da[i * n + start..i * n + start + width];
                        kernels::axpy(1.0, &g[i * width..(i + 1) * width], dst);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let n = self.node(p).value.shape()[1];
                    self.accumulate(grads, p, |dp| {
                        for i in 0..m {
                            let src = &g[i * total + offset..i * total + offset + n];
                            kernels::axpy(1.0, src, &mut dp[i * n..(i + 1) * n]);
                        }
                    });
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(grads, *a, |da| da.iter_mut().for_each(|d| *d += s));
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
                weights,
            } => {
                let s = g[0];
                let k = probs.len() / targets.len().max(1);
                self.accumulate(grads, *logits, |dz| {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dz[i * k + j] += s * w * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
    tracked: Vec<bool>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<&Tensor> {
        if v.graph != self.graph || v.index >= self.tracked.len() || !self.tracked[v.index] {
            return Err(Error::AbsentGradient(v.index));
        }
        Ok(self.grads[v.index]
            .as_ref()
            .expect("tracked node has a gradient"))
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        self.get(v)?;
        Ok(self.grads[v.index]
            .take()
            .expect("tracked node has a gradient"))
    }
}
