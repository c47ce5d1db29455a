//! Minimal reverse-mode autodiff over matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its inputs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lsh::Clustering;
use crate::tensor::{Matrix, Real};

pub(crate) type NodeId = usize;

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a `1 × cols` row to every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    /// `out[k] = x[idx[k]]` over flattened storage.
    Gather {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    /// Mean of each consecutive block of `block` rows.
    MeanBlocks {
        x: NodeId,
        block: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    VStack(Vec<NodeId>),
    HStack(Vec<NodeId>),
    Centroids {
        x: NodeId,
        c: Arc<Clustering>,
    },
    Scatter {
        x: NodeId,
        c: Arc<Clustering>,
    },
    /// Value replaced by a transform whose gradient is taken as identity.
    StraightThrough(NodeId),
    /// Mean softmax cross-entropy; stores the probabilities.
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
    /// Scalar computed outside the tape with known input gradients.
    External {
        inputs: Vec<NodeId>,
        grads: Vec<Matrix<T>>,
    },
    /// Sum of scalars.
    SumScalars(Vec<NodeId>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub(crate) struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape(format!(
                "bias is {}x{}, expected 1x{}",
                r.rows(),
                r.cols(),
                x.cols()
            )));
        }
        let bias = r.row(0);
        let v = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + bias[j]);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = crate::reuse::softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gather(
        &mut self,
        x: NodeId,
        idx: Arc<Vec<usize>>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let src = self.value(x).data();
        if idx.len() != rows * cols || idx.iter().any(|&i| i >= src.len()) {
            return Err(Error::shape("gather indices do not fit"));
        }
        let v = Matrix::new(rows, cols, idx.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(v, Op::Gather { x, idx }))
    }

    pub fn mean_blocks(&mut self, x: NodeId, block: usize) -> Result<NodeId> {
        let m = self.value(x);
        if block == 0 || m.rows() % block != 0 {
            return Err(Error::shape(format!(
                "{} rows do not split into blocks of {block}",
                m.rows()
            )));
        }
        let n = T::from_usize(block);
        let v = Matrix::from_fn(m.rows() / block, m.cols(), |b, j| {
            (0..block).map(|r| m.get(b * block + r, j)).sum::<T>() / n
        });
        Ok(self.push(v, Op::MeanBlocks { x, block }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(x).slice_rows(start, end);
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(x).slice_cols(start, end);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn vstack(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let v = Matrix::vstack(&parts.iter().map(|&p| self.value(p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::VStack(parts)))
    }

    pub fn hstack(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let v = Matrix::hstack(&parts.iter().map(|&p| self.value(p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::HStack(parts)))
    }

    pub fn centroids(&mut self, x: NodeId, c: Arc<Clustering>) -> Result<NodeId> {
        let v = c.centroids(self.value(x))?;
        Ok(self.push(v, Op::Centroids { x, c }))
    }

    pub fn scatter(&mut self, x: NodeId, c: Arc<Clustering>) -> Result<NodeId> {
        let v = c.scatter(self.value(x))?;
        Ok(self.push(v, Op::Scatter { x, c }))
    }

    pub fn straight_through(
        &mut self,
        x: NodeId,
        f: impl FnOnce(&Matrix<T>) -> Matrix<T>,
    ) -> Result<NodeId> {
        let v = f(self.value(x));
        self.value(x).expect_same_shape(&v)?;
        Ok(self.push(v, Op::StraightThrough(x)))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        if l.rows() != labels.len() || labels.iter().any(|&y| y >= l.cols()) {
            return Err(Error::shape("labels do not match logits"));
        }
        let probs = crate::reuse::softmax_rows(l);
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = l.row(i);
            let m = row.iter().fold(row[0], |a, &b| a.max(b)).to_f64();
            let lse = m + row.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln();
            total += lse - row[y].to_f64();
        }
        let v = Matrix::from_fn(1, 1, |_, _| T::from_f64(total / labels.len() as f64));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn external(
        &mut self,
        value: f64,
        inputs: Vec<NodeId>,
        grads: Vec<Matrix<T>>,
    ) -> Result<NodeId> {
        for (&i, g) in inputs.iter().zip(&grads) {
            self.value(i).expect_same_shape(g)?;
        }
        let v = Matrix::from_fn(1, 1, |_, _| T::from_f64(value));
        Ok(self.push(v, Op::External { inputs, grads }))
    }

    pub fn sum_scalars(&mut self, parts: Vec<NodeId>) -> NodeId {
        let total = parts.iter().map(|&p| self.value(p).get(0, 0)).sum::<T>();
        self.push(Matrix::from_fn(1, 1, |_, _| total), Op::SumScalars(parts))
    }

    /// Gradients of scalar node `root` with respect to every node. Entries
    /// are `None` for nodes the root does not depend on.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Matrix<T>>>> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Matrix::from_fn(1, 1, |_, _| T::one()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut send = |to: NodeId, delta: Matrix<T>| -> Result<()> {
                match &mut grads[to] {
                    Some(acc) => acc.add_assign(&delta),
                    slot => {
                        *slot = Some(delta);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    send(*a, g.matmul_t(self.value(*b))?)?;
                    send(*b, self.value(*a).t_matmul(&g)?)?;
                }
                Op::MatMulT(a, b) => {
                    send(*a, g.matmul(self.value(*b))?)?;
                    send(*b, g.t_matmul(self.value(*a))?)?;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::AddRow(a, row) => {
                    let summed = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|i| g.get(i, j)).sum()
                    });
                    send(*a, g)?;
                    send(*row, summed)?;
                }
                Op::StraightThrough(a) => send(*a, g)?,
                Op::Scale(a, s) => send(*a, g.scale(*s))?,
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(
                        *a,
                        g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?,
                    )?;
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut out = Matrix::zeros(s.rows(), s.cols());
                    for i in 0..s.rows() {
                        let (sr, gr) = (s.row(i), g.row(i));
                        let inner: T = sr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (o, (&sv, &gv)) in out.row_mut(i).iter_mut().zip(sr.iter().zip(gr)) {
                            *o = sv * (gv - inner);
                        }
                    }
                    send(*a, out)?;
                }
                Op::Gather { x, idx } => {
                    let src = self.value(*x);
                    let mut out = Matrix::zeros(src.rows(), src.cols());
                    let data = out.data_mut();
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        data[i] += gv;
                    }
                    send(*x, out)?;
                }
                Op::MeanBlocks { x, block } => {
                    let n = T::from_usize(*block);
                    let rows = self.value(*x).rows();
                    send(
                        *x,
                        Matrix::from_fn(rows, g.cols(), |i, j| g.get(i / block, j) / n),
                    )?;
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut out = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        out.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    send(*x, out)?;
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut out = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        out.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    send(*x, out)?;
                }
                Op::VStack(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        send(p, g.slice_rows(r, r + n))?;
                        r += n;
                    }
                }
                Op::HStack(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        send(p, g.slice_cols(c, c + n))?;
                        c += n;
                    }
                }
                Op::Centroids { x, c } => send(*x, c.centroids_backward(&g)?)?,
                Op::Scatter { x, c } => send(*x, c.scatter_backward(&g)?)?,
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.get(0, 0) / T::from_usize(labels.len());
                    let mut out = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        out.row_mut(i)[y] -= T::one();
                    }
                    send(*logits, out.scale(scale))?;
                }
                Op::External {
                    inputs,
                    grads: local,
                } => {
                    let s = g.get(0, 0);
                    for (&i, lg) in inputs.iter().zip(local) {
                        send(i, lg.scale(s))?;
                    }
                }
                Op::SumScalars(parts) => {
                    for &p in parts {
                        send(p, g.clone())?;
                    }
                }
            }
        }
        Ok(grads)
    }
}
