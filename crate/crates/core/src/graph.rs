//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! tape visits every node after all of its consumers. Ops are coarse (whole
//! matrices, fused block mixes) to keep the tape short for batched training.

use crate::sinkhorn::{normalize_cols, normalize_rows, positive_kernel};
use crate::tensor::{matmul, rms_scale, sigmoid, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `exp((w - max w) / tau)`.
    PositiveKernel(NodeId, f64),
    NormalizeRows(NodeId),
    NormalizeCols(NodeId),
    Symmetrize(NodeId),
    Swish(NodeId),
    RmsNormRows(NodeId, f64),
    SoftmaxRows(NodeId),
    Reshape(NodeId),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    BlockLocal { x: NodeId, weights: Vec<NodeId> },
    BlockGlobal { h: NodeId, g: NodeId, block: usize },
    BatchMatMul(BatchMatMul),
    /// Mean binary cross-entropy of an `N × 1` logit column against fixed labels.
    Bce(NodeId, Vec<f64>),
}

/// Per-sample matrix product `C_s = A_s · op(B_s)` over `batch` stacked samples.
#[derive(Clone, Copy, Debug)]
struct BatchMatMul {
    a: NodeId,
    b: NodeId,
    batch: usize,
    a_shared: bool,
    b_shared: bool,
    trans_b: bool,
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of `shape` if the output does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b)).expect("graph matmul shape");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b)).expect("graph add shape");
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × m` bias to every row of an `n × m` matrix.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, v.cols()), "bias shape");
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        self.push(v, Op::AddRowBias(a, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y).expect("graph mul shape");
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn positive_kernel(&mut self, a: NodeId, tau: f64) -> crate::Result<NodeId> {
        let v = positive_kernel(self.value(a), tau)?;
        Ok(self.push(v, Op::PositiveKernel(a, tau)))
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        normalize_rows(&mut v);
        self.push(v, Op::NormalizeRows(a))
    }

    pub fn normalize_cols(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        normalize_cols(&mut v);
        self.push(v, Op::NormalizeCols(a))
    }

    pub fn symmetrize(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Matrix::from_fn(x.rows(), x.cols(), |i, j| 0.5 * (x[(i, j)] + x[(j, i)]));
        self.push(v, Op::Symmetrize(a))
    }

    /// Fixed-depth Sinkhorn unroll matching [`crate::sinkhorn::sinkhorn_fixed`],
    /// including the trailing symmetrization of symmetric inputs.
    pub fn sinkhorn(&mut self, w: NodeId, tau: f64, iters: usize) -> crate::Result<NodeId> {
        let symmetric = *self.value(w) == self.value(w).transpose();
        let mut m = self.positive_kernel(w, tau)?;
        for _ in 0..iters {
            m = self.normalize_rows(m);
            m = self.normalize_cols(m);
        }
        if symmetric {
            m = self.symmetrize(m);
        }
        Ok(m)
    }

    pub fn swish(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Swish(a))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let s = rms_scale(v.row(i), eps);
            v.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        self.push(v, Op::RmsNormRows(a, eps))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-major reinterpretation with the same number of entries.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = Matrix::new(rows, cols, self.value(a).data().to_vec()).expect("graph reshape size");
        self.push(v, Op::Reshape(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "column slice out of range");
        let v = Matrix::from_fn(x.rows(), len, |i, j| x[(i, start + j)]);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "row slice out of range");
        let v = Matrix::new(len, x.cols(), x.data()[start * x.cols()..(start + len) * x.cols()].to_vec()).unwrap();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat row mismatch");
            for i in 0..rows {
                v.row_mut(i)[offset..offset + x.cols()].copy_from_slice(x.row(i));
            }
            offset += x.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat col mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Matrix::new(rows, cols, data).unwrap(), Op::ConcatRows(parts.to_vec()))
    }

    /// Embedding lookup: row `k` of the result is `table[idx[k]]`.
    pub fn gather_rows(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Matrix::new(idx.len(), t.cols(), data).unwrap();
        self.push(v, Op::GatherRows(table, idx))
    }

    /// Chunk `i` of every row is multiplied by `weights[i]`. All weights share
    /// one shape `p × q`; the input has chunks of width `p`, the output of width `q`.
    pub fn block_local(&mut self, x: NodeId, weights: &[NodeId]) -> NodeId {
        let xv = self.value(x);
        let (p, q) = self.value(weights[0]).shape();
        assert_eq!(xv.cols(), p * weights.len(), "block_local width");
        let mut v = Matrix::zeros(xv.rows(), q * weights.len());
        for (i, &w) in weights.iter().enumerate() {
            let wv = self.value(w);
            assert_eq!(wv.shape(), (p, q), "block_local weight shape");
            for s in 0..xv.rows() {
                let src = &xv.row(s)[i * p..(i + 1) * p];
                let dst = &mut v.row_mut(s)[i * q..(i + 1) * q];
                for (k, &xk) in src.iter().enumerate() {
                    dst.iter_mut().zip(wv.row(k)).for_each(|(o, &wk)| *o += xk * wk);
                }
            }
        }
        self.push(v, Op::BlockLocal { x, weights: weights.to_vec() })
    }

    /// Per row: chunk `i` of the output is `Σ_j g[(i, j)] · chunk_j(h)`.
    pub fn block_global(&mut self, h: NodeId, g: NodeId, block: usize) -> NodeId {
        let hv = self.value(h);
        let gv = self.value(g);
        let n = gv.rows();
        assert_eq!(hv.cols(), n * block, "block_global width");
        let mut v = Matrix::zeros(hv.rows(), hv.cols());
        for s in 0..hv.rows() {
            let src = hv.row(s);
            let dst = v.row_mut(s);
            for i in 0..n {
                for j in 0..n {
                    let gij = gv[(i, j)];
                    for e in 0..block {
                        dst[i * block + e] += gij * src[j * block + e];
                    }
                }
            }
        }
        self.push(v, Op::BlockGlobal { h, g, block })
    }

    /// Batched product of `batch` stacked matrices. A batched operand with `r`
    /// rows per sample is stored as `(batch·r) × c`; a shared one is plain `r × c`.
    /// With `trans_b`, each `B_s` is stored transposed.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, batch: usize, a_shared: bool, b_shared: bool, trans_b: bool) -> NodeId {
        let spec = BatchMatMul { a, b, batch, a_shared, b_shared, trans_b };
        let v = bmm_forward(self.value(a), self.value(b), &spec);
        self.push(v, Op::BatchMatMul(spec))
    }

    pub fn bce(&mut self, logits: NodeId, labels: Vec<f64>) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.shape(), (labels.len(), 1), "bce shape");
        let loss = bce_value(z.data(), &labels);
        self.push(Matrix::filled(1, 1, loss), Op::Bce(logits, labels))
    }

    /// Reverse sweep from a `1 × 1` output node.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, y: &Matrix, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = matmul(dy, &self.value(*b).transpose()).unwrap();
                let db = matmul(&self.value(*a).transpose(), dy).unwrap();
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], dy.clone());
                accumulate(&mut grads[b.0], dy.clone());
            }
            Op::AddRowBias(a, bias) => {
                accumulate(&mut grads[a.0], dy.clone());
                accumulate(&mut grads[bias.0], Matrix::new(1, dy.cols(), dy.col_sums()).unwrap());
            }
            Op::Mul(a, b) => {
                let da = dy.zip_with(self.value(*b), |g, v| g * v).unwrap();
                let db = dy.zip_with(self.value(*a), |g, v| g * v).unwrap();
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], dy.scale(*c)),
            Op::PositiveKernel(a, tau) => {
                let mut dx = dy.zip_with(y, |g, v| g * v / tau).unwrap();
                // The shift depends on the argmax entry. The term cancels once
                // the kernel is normalized but keeps this op exact on its own.
                let x = self.value(*a);
                let arg = (0..x.len()).fold(0, |best, k| if x.data()[k] > x.data()[best] { k } else { best });
                let total: f64 = dx.data().iter().sum();
                dx.data_mut()[arg] -= total;
                accumulate(&mut grads[a.0], dx);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let s: f64 = x.row(i).iter().sum();
                    let inner: f64 = dy.row(i).iter().zip(y.row(i)).map(|(g, v)| g * v).sum();
                    for ((d, g), _) in dx.row_mut(i).iter_mut().zip(dy.row(i)).zip(y.row(i)) {
                        *d = (g - inner) / s;
                    }
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::NormalizeCols(a) => {
                let x = self.value(*a);
                let sums = x.col_sums();
                let mut inner = vec![0.0; x.cols()];
                for i in 0..x.rows() {
                    for (acc, (g, v)) in inner.iter_mut().zip(dy.row(i).iter().zip(y.row(i))) {
                        *acc += g * v;
                    }
                }
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| (dy[(i, j)] - inner[j]) / sums[j]);
                accumulate(&mut grads[a.0], dx);
            }
            Op::Symmetrize(a) => {
                let dx = Matrix::from_fn(dy.rows(), dy.cols(), |i, j| 0.5 * (dy[(i, j)] + dy[(j, i)]));
                accumulate(&mut grads[a.0], dx);
            }
            Op::Swish(a) => {
                let dx = dy
                    .zip_with(self.value(*a), |g, x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .unwrap();
                accumulate(&mut grads[a.0], dx);
            }
            Op::RmsNormRows(a, eps) => {
                let x = self.value(*a);
                let n = x.cols() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let r = rms_scale(x.row(i), *eps);
                    let gx: f64 = dy.row(i).iter().zip(x.row(i)).map(|(g, v)| g * v).sum();
                    let c = r * r * r * gx / n;
                    for ((d, g), v) in dx.row_mut(i).iter_mut().zip(dy.row(i)).zip(x.row(i)) {
                        *d = r * g - c * v;
                    }
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let inner: f64 = dy.row(i).iter().zip(y.row(i)).map(|(g, v)| g * v).sum();
                    for ((d, g), v) in dx.row_mut(i).iter_mut().zip(dy.row(i)).zip(y.row(i)) {
                        *d = v * (g - inner);
                    }
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(&mut grads[a.0], Matrix::new(r, c, dy.data().to_vec()).unwrap());
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                accumulate(&mut grads[a.0], dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let dp = Matrix::from_fn(dy.rows(), c, |i, j| dy[(i, offset + j)]);
                    accumulate(&mut grads[p.0], dp);
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    let dp = Matrix::new(r, c, dy.data()[offset..offset + r * c].to_vec()).unwrap();
                    accumulate(&mut grads[p.0], dp);
                    offset += r * c;
                }
            }
            Op::GatherRows(table, idx) => {
                let (r, c) = self.value(*table).shape();
                let mut dt = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    dt.row_mut(i).iter_mut().zip(dy.row(k)).for_each(|(d, g)| *d += g);
                }
                accumulate(&mut grads[table.0], dt);
            }
            Op::BlockLocal { x, weights } => {
                let xv = self.value(*x);
                let (p, q) = self.value(weights[0]).shape();
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &w) in weights.iter().enumerate() {
                    let wv = self.value(w);
                    let mut dw = Matrix::zeros(p, q);
                    for s in 0..xv.rows() {
                        let xs = &xv.row(s)[i * p..(i + 1) * p];
                        let gs = &dy.row(s)[i * q..(i + 1) * q];
                        let dxs = &mut dx.row_mut(s)[i * p..(i + 1) * p];
                        for k in 0..p {
                            dxs[k] += gs.iter().zip(wv.row(k)).map(|(g, w)| g * w).sum::<f64>();
                            let xk = xs[k];
                            dw.row_mut(k).iter_mut().zip(gs).for_each(|(d, g)| *d += xk * g);
                        }
                    }
                    accumulate(&mut grads[w.0], dw);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::BlockGlobal { h, g, block } => {
                let hv = self.value(*h);
                let gv = self.value(*g);
                let n = gv.rows();
                let mut dh = Matrix::zeros(hv.rows(), hv.cols());
                let mut dg = Matrix::zeros(n, n);
                for s in 0..hv.rows() {
                    let hs = hv.row(s);
                    let gs = dy.row(s);
                    let dhs = dh.row_mut(s);
                    for i in 0..n {
                        let gi = &gs[i * block..(i + 1) * block];
                        for j in 0..n {
                            let hj = &hs[j * block..(j + 1) * block];
                            dg[(i, j)] += gi.iter().zip(hj).map(|(a, b)| a * b).sum::<f64>();
                            let gij = gv[(i, j)];
                            for e in 0..*block {
                                dhs[j * block + e] += gij * gi[e];
                            }
                        }
                    }
                }
                accumulate(&mut grads[h.0], dh);
                accumulate(&mut grads[g.0], dg);
            }
            Op::BatchMatMul(spec) => {
                let (da, db) = bmm_backward(self.value(spec.a), self.value(spec.b), dy, spec);
                accumulate(&mut grads[spec.a.0], da);
                accumulate(&mut grads[spec.b.0], db);
            }
            Op::Bce(z, labels) => {
                let zv = self.value(*z);
                let n = labels.len() as f64;
                let g = dy[(0, 0)];
                let data = zv.data().iter().zip(labels).map(|(&zi, &yi)| g * (sigmoid(zi) - yi) / n).collect();
                accumulate(&mut grads[z.0], Matrix::new(zv.rows(), 1, data).unwrap());
            }
        }
    }
}

/// Numerically stable mean of `softplus(z) - y·z`.
pub fn bce_value(logits: &[f64], labels: &[f64]) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z)
        .sum();
    sum / logits.len() as f64
}

fn sample_block(m: &Matrix, s: usize, shared: bool, rows: usize) -> &[f64] {
    if shared {
        m.data()
    } else {
        &m.data()[s * rows * m.cols()..(s + 1) * rows * m.cols()]
    }
}

fn bmm_dims(a: &Matrix, b: &Matrix, spec: &BatchMatMul) -> (usize, usize, usize) {
    let m = if spec.a_shared { a.rows() } else { a.rows() / spec.batch };
    let k = a.cols();
    let n = if spec.trans_b {
        if spec.b_shared { b.rows() } else { b.rows() / spec.batch }
    } else {
        b.cols()
    };
    let b_inner = if spec.trans_b { b.cols() } else if spec.b_shared { b.rows() } else { b.rows() / spec.batch };
    assert_eq!(k, b_inner, "batch_matmul inner dimension");
    (m, k, n)
}

fn bmm_forward(a: &Matrix, b: &Matrix, spec: &BatchMatMul) -> Matrix {
    let (m, k, n) = bmm_dims(a, b, spec);
    let b_rows = if spec.trans_b { n } else { k };
    let mut out = Matrix::zeros(spec.batch * m, n);
    for s in 0..spec.batch {
        let asub = sample_block(a, s, spec.a_shared, m);
        let bsub = sample_block(b, s, spec.b_shared, b_rows);
        let dst = &mut out.data_mut()[s * m * n..(s + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = asub[i * k + p];
                for j in 0..n {
                    let bpj = if spec.trans_b { bsub[j * k + p] } else { bsub[p * n + j] };
                    dst[i * n + j] += aip * bpj;
                }
            }
        }
    }
    out
}

fn bmm_backward(a: &Matrix, b: &Matrix, dy: &Matrix, spec: &BatchMatMul) -> (Matrix, Matrix) {
    let (m, k, n) = bmm_dims(a, b, spec);
    let b_rows = if spec.trans_b { n } else { k };
    let mut da = Matrix::zeros(a.rows(), a.cols());
    let mut db = Matrix::zeros(b.rows(), b.cols());
    for s in 0..spec.batch {
        let asub = sample_block(a, s, spec.a_shared, m);
        let bsub = sample_block(b, s, spec.b_shared, b_rows);
        let g = &dy.data()[s * m * n..(s + 1) * m * n];
        let a_off = if spec.a_shared { 0 } else { s * m * k };
        let b_off = if spec.b_shared { 0 } else { s * b_rows * b.cols() };
        for i in 0..m {
            for p in 0..k {
                let aip = asub[i * k + p];
                let mut acc = 0.0;
                for j in 0..n {
                    let gij = g[i * n + j];
                    let (bidx, bpj) = if spec.trans_b {
                        (j * k + p, bsub[j * k + p])
                    } else {
                        (p * n + j, bsub[p * n + j])
                    };
                    acc += gij * bpj;
                    db.data_mut()[b_off + bidx] += aip * gij;
                }
                da.data_mut()[a_off + i * k + p] += acc;
            }
        }
    }
    (da, db)
}
