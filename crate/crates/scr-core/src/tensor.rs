//! Dense matrix container plus reverse-mode differentiation for the fixed
//! set of operations the model needs.
//!
//! Values are stored in double precision throughout; gradient accumulation
//! and the finite-difference harness therefore run in double precision as
//! well. Matrices are immutable once built (`Arc`-backed), so cloning a
//! [`Matrix`] is cheap and a [`Tape`] can hold values by value.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

/// Row-wise layer normalization guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Guard under the square root of the STD aggregator. The forward value is
/// `sqrt(var + EPS) - sqrt(EPS)` so that a zero-variance message set maps to
/// exactly zero while the backward pass stays finite at var = 0.
pub const STD_EPS: f64 = 1e-8;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("index {index} out of range for {len} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("loss must be a 1x1 tensor, got {0}x{1}")]
    NotScalar(usize, usize),
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix with shared storage.
#[derive(Clone, Debug)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix {
            rows,
            cols,
            data: Arc::new(data),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    /// Glorot-uniform initialization: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Scalar value of a 1x1 matrix.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_vec(self.cols, self.rows, out)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with a single entry shifted by `delta`. Used by the
    /// finite-difference harness.
    pub fn perturbed(&self, i: usize, j: usize, delta: f64) -> Matrix {
        let mut data = self.data.as_ref().clone();
        data[i * self.cols + j] += delta;
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn matmul_raw(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Matrix::from_vec(m, n, out)
}

/// out += alpha * A(^T?) * B(^T?), accumulating into an existing buffer.
fn matmul_acc(out: &mut [f64], a: &Matrix, ta: bool, b: &Matrix, tb: bool) {
    let (am, ak) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (bk, bn) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(ak, bk);
    assert_eq!(out.len(), am * bn);
    if am == 0 || bn == 0 || ak == 0 {
        return;
    }
    let (rsa, csa) = if ta {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    unsafe {
        matrixmultiply::dgemm(
            am,
            ak,
            bn,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            bn as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Edge list for graph aggregation ops
// ---------------------------------------------------------------------------

/// Directed typed edges used by the message-passing aggregator. A message for
/// edge `(src, rel, dst)` is `state[src] ⊙ rel_emb[rel]`, delivered to `dst`.
#[derive(Clone, Debug, Default)]
pub struct EdgeList {
    pub src: Vec<u32>,
    pub rel: Vec<u32>,
    pub dst: Vec<u32>,
    pub num_nodes: usize,
    in_degree: Vec<u32>,
}

impl EdgeList {
    pub fn new(num_nodes: usize, src: Vec<u32>, rel: Vec<u32>, dst: Vec<u32>) -> Self {
        assert_eq!(src.len(), rel.len());
        assert_eq!(src.len(), dst.len());
        let mut in_degree = vec![0u32; num_nodes];
        for &d in &dst {
            in_degree[d as usize] += 1;
        }
        EdgeList {
            src,
            rel,
            dst,
            num_nodes,
            in_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn in_degree(&self, node: usize) -> u32 {
        self.in_degree[node]
    }

    pub fn max_rel(&self) -> Option<u32> {
        self.rel.iter().copied().max()
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// matrix + broadcast row vector (1 x c)
    AddRow(NodeId, NodeId),
    /// matrix ⊙ broadcast row vector (1 x c)
    MulRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    LayerNorm(NodeId),
    ConcatCols(NodeId, NodeId),
    SelectRows(NodeId, Arc<Vec<usize>>),
    /// out[dst[i]] += input[srcrow[i]]; rows not referenced stay zero.
    ScatterRows {
        input: NodeId,
        dst: Arc<Vec<usize>>,
        srcrow: Arc<Vec<usize>>,
    },
    /// out[index[i]] += messages[i]
    ScatterAdd {
        messages: NodeId,
        index: Arc<Vec<usize>>,
    },
    /// per-node MEAN and STD over rows of `messages` grouped by `index`;
    /// output is rows x 2d: [mean | std]
    SegmentMeanStd {
        messages: NodeId,
        index: Arc<Vec<usize>>,
    },
    /// Fused DistMult message + MEAN/STD aggregation over an edge list.
    /// Equivalent to building all messages `state[src] ⊙ rel[rel]` and
    /// applying SegmentMeanStd by dst, without materializing them.
    EdgeAgg {
        states: NodeId,
        rel: NodeId,
        edges: Arc<EdgeList>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Matrix,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Wengert tape: ops append nodes in execution order; `backward` replays them
/// in reverse, visiting each node once.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient tracked.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; gradient accumulated by `backward`.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let value = matmul_raw(va, vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: va.shape(),
                rhs: vr.shape(),
            });
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vr.data()[i % cols])
            .collect();
        let value = Matrix::from_vec(va.rows(), cols, data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(TensorError::Shape {
                op: "mul_row",
                lhs: va.shape(),
                rhs: vr.shape(),
            });
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vr.data()[i % cols])
            .collect();
        let value = Matrix::from_vec(va.rows(), cols, data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "hadamard",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Row-wise layer normalization with no learned scale/shift:
    /// y = (x - mean) / sqrt(var + eps), population variance per row.
    /// A zero-variance row maps to zeros.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let value = layer_norm_forward(va);
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let value = Matrix::from_vec(r, ca + cb, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn select_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let va = self.value(a);
        for &i in &indices {
            if i >= va.rows() {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: i,
                    len: va.rows(),
                });
            }
        }
        let cols = va.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            data.extend_from_slice(va.row(i));
        }
        let value = Matrix::from_vec(indices.len(), cols, data);
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::SelectRows(a, Arc::new(indices)),
            rg,
        ))
    }

    /// Builds an `out_rows x cols` matrix where row `dst[i]` accumulates row
    /// `srcrow[i]` of the input; all other rows are zero.
    pub fn scatter_rows(
        &mut self,
        input: NodeId,
        dst: Vec<usize>,
        srcrow: Vec<usize>,
        out_rows: usize,
    ) -> Result<NodeId> {
        let vi = self.value(input);
        if dst.len() != srcrow.len() {
            return Err(TensorError::Shape {
                op: "scatter_rows",
                lhs: (dst.len(), 0),
                rhs: (srcrow.len(), 0),
            });
        }
        for &i in &srcrow {
            if i >= vi.rows() {
                return Err(TensorError::Index {
                    op: "scatter_rows",
                    index: i,
                    len: vi.rows(),
                });
            }
        }
        for &i in &dst {
            if i >= out_rows {
                return Err(TensorError::Index {
                    op: "scatter_rows",
                    index: i,
                    len: out_rows,
                });
            }
        }
        let cols = vi.cols();
        let mut data = vec![0.0; out_rows * cols];
        for (&d, &s) in dst.iter().zip(srcrow.iter()) {
            let src = vi.row(s);
            let dstrow = &mut data[d * cols..(d + 1) * cols];
            for j in 0..cols {
                dstrow[j] += src[j];
            }
        }
        let value = Matrix::from_vec(out_rows, cols, data);
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::ScatterRows {
                input,
                dst: Arc::new(dst),
                srcrow: Arc::new(srcrow),
            },
            rg,
        ))
    }

    /// out[index[i]] += messages[i] over message rows.
    pub fn scatter_add(
        &mut self,
        messages: NodeId,
        index: Vec<usize>,
        out_rows: usize,
    ) -> Result<NodeId> {
        let vm = self.value(messages);
        if index.len() != vm.rows() {
            return Err(TensorError::Shape {
                op: "scatter_add",
                lhs: (index.len(), 0),
                rhs: vm.shape(),
            });
        }
        for &i in &index {
            if i >= out_rows {
                return Err(TensorError::Index {
                    op: "scatter_add",
                    index: i,
                    len: out_rows,
                });
            }
        }
        let cols = vm.cols();
        let mut data = vec![0.0; out_rows * cols];
        for (e, &n) in index.iter().enumerate() {
            let msg = vm.row(e);
            let out = &mut data[n * cols..(n + 1) * cols];
            for j in 0..cols {
                out[j] += msg[j];
            }
        }
        let value = Matrix::from_vec(out_rows, cols, data);
        let rg = self.rg(messages);
        Ok(self.push(
            value,
            Op::ScatterAdd {
                messages,
                index: Arc::new(index),
            },
            rg,
        ))
    }

    /// Per-node MEAN and STD (population) over message rows grouped by
    /// `index`. Output is `out_rows x 2d`, columns `[mean | std]`. Nodes with
    /// no messages get zero for both halves.
    pub fn segment_mean_std(
        &mut self,
        messages: NodeId,
        index: Vec<usize>,
        out_rows: usize,
    ) -> Result<NodeId> {
        let vm = self.value(messages);
        if index.len() != vm.rows() {
            return Err(TensorError::Shape {
                op: "segment_mean_std",
                lhs: (index.len(), 0),
                rhs: vm.shape(),
            });
        }
        for &i in &index {
            if i >= out_rows {
                return Err(TensorError::Index {
                    op: "segment_mean_std",
                    index: i,
                    len: out_rows,
                });
            }
        }
        let cols = vm.cols();
        let mut sum = vec![0.0; out_rows * cols];
        let mut sumsq = vec![0.0; out_rows * cols];
        let mut count = vec![0u32; out_rows];
        for (e, &n) in index.iter().enumerate() {
            count[n] += 1;
            let msg = vm.row(e);
            for j in 0..cols {
                let m = msg[j];
                sum[n * cols + j] += m;
                sumsq[n * cols + j] += m * m;
            }
        }
        let value = finalize_mean_std(&sum, &sumsq, &count, out_rows, cols);
        let rg = self.rg(messages);
        Ok(self.push(
            value,
            Op::SegmentMeanStd {
                messages,
                index: Arc::new(index),
            },
            rg,
        ))
    }

    /// Fused DistMult message + MEAN/STD aggregation: for each edge
    /// `(w, r, v)` the message `state[w] ⊙ rel[r]` is aggregated at `v`.
    /// Output is `num_nodes x 2d`, columns `[mean | std]`.
    pub fn edge_agg(
        &mut self,
        states: NodeId,
        rel: NodeId,
        edges: Arc<EdgeList>,
    ) -> Result<NodeId> {
        let (vs, vr) = (self.value(states), self.value(rel));
        if vs.cols() != vr.cols() {
            return Err(TensorError::Shape {
                op: "edge_agg",
                lhs: vs.shape(),
                rhs: vr.shape(),
            });
        }
        if vs.rows() != edges.num_nodes {
            return Err(TensorError::Shape {
                op: "edge_agg",
                lhs: vs.shape(),
                rhs: (edges.num_nodes, vs.cols()),
            });
        }
        if let Some(maxr) = edges.max_rel() {
            if maxr as usize >= vr.rows() {
                return Err(TensorError::Index {
                    op: "edge_agg",
                    index: maxr as usize,
                    len: vr.rows(),
                });
            }
        }
        let cols = vs.cols();
        let n = edges.num_nodes;
        let mut sum = vec![0.0; n * cols];
        let mut sumsq = vec![0.0; n * cols];
        for e in 0..edges.len() {
            let s = vs.row(edges.src[e] as usize);
            let r = vr.row(edges.rel[e] as usize);
            let d = edges.dst[e] as usize;
            let acc = &mut sum[d * cols..(d + 1) * cols];
            let accsq = &mut sumsq[d * cols..(d + 1) * cols];
            for j in 0..cols {
                let m = s[j] * r[j];
                acc[j] += m;
                accsq[j] += m * m;
            }
        }
        let counts: Vec<u32> = (0..n).map(|v| edges.in_degree(v)).collect();
        let value = finalize_mean_std(&sum, &sumsq, &counts, n, cols);
        let rg = self.rg(states) || self.rg(rel);
        Ok(self.push(value, Op::EdgeAgg { states, rel, edges }, rg))
    }

    /// Elementwise binary cross-entropy on logits:
    /// `max(x,0) - t*x + ln(1 + exp(-|x|))`, numerically stable.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Matrix) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.shape() != targets.shape() {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: vl.shape(),
                rhs: targets.shape(),
            });
        }
        let data = vl
            .data()
            .iter()
            .zip(targets.data().iter())
            .map(|(&x, &t)| x.max(0.0) - t * x + (-x.abs()).exp().ln_1p())
            .collect();
        let value = Matrix::from_vec(vl.rows(), vl.cols(), data);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::BceWithLogits { logits, targets }, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s: f64 = va.data().iter().sum();
        let rg = self.rg(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.len().max(1);
        let s: f64 = va.data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::MeanAll(a), rg)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients for every
    /// node that requires grad and is reachable from the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(TensorError::NotScalar(lv.rows(), lv.cols()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            let out_val = &self.nodes[id].value;
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let gm = Matrix::from_vec(out_val.rows(), out_val.cols(), g);
                    if self.rg(*a) {
                        let ga = self.grad_buf(&mut grads, *a);
                        matmul_acc(ga, &gm, false, vb, true);
                    }
                    if self.rg(*b) {
                        let gb = self.grad_buf(&mut grads, *b);
                        matmul_acc(gb, va, true, &gm, false);
                    }
                }
                Op::Add(a, b) => {
                    for &inp in &[*a, *b] {
                        if self.rg(inp) {
                            let gi = self.grad_buf(&mut grads, inp);
                            for (o, v) in gi.iter_mut().zip(g.iter()) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*a) {
                        let ga = self.grad_buf(&mut grads, *a);
                        for (o, v) in ga.iter_mut().zip(g.iter()) {
                            *o += v;
                        }
                    }
                    if self.rg(*row) {
                        let cols = self.nodes[row.0].value.cols();
                        let gr = self.grad_buf(&mut grads, *row);
                        for (i, v) in g.iter().enumerate() {
                            gr[i % cols] += v;
                        }
                    }
                }
                Op::MulRow(a, row) => {
                    let cols = self.nodes[row.0].value.cols();
                    if self.rg(*a) {
                        let rowv = self.nodes[row.0].value.clone();
                        let ga = self.grad_buf(&mut grads, *a);
                        for (i, v) in g.iter().enumerate() {
                            ga[i] += v * rowv.data()[i % cols];
                        }
                    }
                    if self.rg(*row) {
                        let av = self.nodes[a.0].value.clone();
                        let gr = self.grad_buf(&mut grads, *row);
                        for (i, v) in g.iter().enumerate() {
                            gr[i % cols] += v * av.data()[i];
                        }
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.rg(*a) {
                        let vb = self.nodes[b.0].value.clone();
                        let ga = self.grad_buf(&mut grads, *a);
                        for (i, v) in g.iter().enumerate() {
                            ga[i] += v * vb.data()[i];
                        }
                    }
                    if self.rg(*b) {
                        let va = self.nodes[a.0].value.clone();
                        let gb = self.grad_buf(&mut grads, *b);
                        for (i, v) in g.iter().enumerate() {
                            gb[i] += v * va.data()[i];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        let c = *c;
                        let ga = self.grad_buf(&mut grads, *a);
                        for (o, v) in ga.iter_mut().zip(g.iter()) {
                            *o += v * c;
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.rg(*a) {
                        let va = self.nodes[a.0].value.clone();
                        let ga = self.grad_buf(&mut grads, *a);
                        for (i, v) in g.iter().enumerate() {
                            if va.data()[i] > 0.0 {
                                ga[i] += v;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if self.rg(*a) {
                        let y = out_val.clone();
                        let ga = self.grad_buf(&mut grads, *a);
                        for (i, v) in g.iter().enumerate() {
                            let s = y.data()[i];
                            ga[i] += v * s * (1.0 - s);
                        }
                    }
                }
                Op::LayerNorm(a) => {
                    if self.rg(*a) {
                        let xa = self.nodes[a.0].value.clone();
                        let y = out_val.clone();
                        let ga = self.grad_buf(&mut grads, *a);
                        layer_norm_backward(&xa, &y, &g, ga);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let cb = self.nodes[b.0].value.cols();
                    let rows = out_val.rows();
                    if self.rg(*a) {
                        let ga = self.grad_buf(&mut grads, *a);
                        for i in 0..rows {
                            for j in 0..ca {
                                ga[i * ca + j] += g[i * (ca + cb) + j];
                            }
                        }
                    }
                    if self.rg(*b) {
                        let gb = self.grad_buf(&mut grads, *b);
                        for i in 0..rows {
                            for j in 0..cb {
                                gb[i * cb + j] += g[i * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::SelectRows(a, indices) => {
                    if self.rg(*a) {
                        let cols = out_val.cols();
                        let indices = indices.clone();
                        let ga = self.grad_buf(&mut grads, *a);
                        for (k, &i) in indices.iter().enumerate() {
                            for j in 0..cols {
                                ga[i * cols + j] += g[k * cols + j];
                            }
                        }
                    }
                }
                Op::ScatterRows { input, dst, srcrow } => {
                    if self.rg(*input) {
                        let cols = out_val.cols();
                        let (dst, srcrow) = (dst.clone(), srcrow.clone());
                        let gi = self.grad_buf(&mut grads, *input);
                        for (&d, &s) in dst.iter().zip(srcrow.iter()) {
                            for j in 0..cols {
                                gi[s * cols + j] += g[d * cols + j];
                            }
                        }
                    }
                }
                Op::ScatterAdd { messages, index } => {
                    if self.rg(*messages) {
                        let cols = out_val.cols();
                        let index = index.clone();
                        let gm = self.grad_buf(&mut grads, *messages);
                        for (e, &n) in index.iter().enumerate() {
                            for j in 0..cols {
                                gm[e * cols + j] += g[n * cols + j];
                            }
                        }
                    }
                }
                Op::SegmentMeanStd { messages, index } => {
                    if self.rg(*messages) {
                        let vm = self.nodes[messages.0].value.clone();
                        let out = out_val.clone();
                        let index = index.clone();
                        let counts = {
                            let mut c = vec![0u32; out.rows()];
                            for &n in index.iter() {
                                c[n] += 1;
                            }
                            c
                        };
                        let cols = vm.cols();
                        let gm = self.grad_buf(&mut grads, *messages);
                        for (e, &n) in index.iter().enumerate() {
                            let cnt = counts[n] as f64;
                            for j in 0..cols {
                                let mean = out.get(n, j);
                                let std = out.get(n, cols + j);
                                let gmean = g[n * 2 * cols + j];
                                let gstd = g[n * 2 * cols + cols + j];
                                let m = vm.get(e, j);
                                let dvar = gstd * 0.5 / (std + STD_EPS.sqrt());
                                gm[e * cols + j] +=
                                    gmean / cnt + dvar * 2.0 / cnt * (m - mean);
                            }
                        }
                    }
                }
                Op::EdgeAgg { states, rel, edges } => {
                    let vs = self.nodes[states.0].value.clone();
                    let vr = self.nodes[rel.0].value.clone();
                    let out = out_val.clone();
                    let cols = vs.cols();
                    let edges = edges.clone();
                    let rg_s = self.rg(*states);
                    let rg_r = self.rg(*rel);
                    let mut gs = if rg_s { vec![0.0; vs.len()] } else { Vec::new() };
                    let mut gr = if rg_r { vec![0.0; vr.len()] } else { Vec::new() };
                    for e in 0..edges.len() {
                        let (s, r, d) = (
                            edges.src[e] as usize,
                            edges.rel[e] as usize,
                            edges.dst[e] as usize,
                        );
                        let cnt = edges.in_degree(d) as f64;
                        for j in 0..cols {
                            let sv = vs.get(s, j);
                            let rv = vr.get(r, j);
                            let m = sv * rv;
                            let mean = out.get(d, j);
                            let std = out.get(d, cols + j);
                            let gmean = g[d * 2 * cols + j];
                            let gstd = g[d * 2 * cols + cols + j];
                            let dvar = gstd * 0.5 / (std + STD_EPS.sqrt());
                            let gmsg = gmean / cnt + dvar * 2.0 / cnt * (m - mean);
                            if rg_s {
                                gs[s * cols + j] += gmsg * rv;
                            }
                            if rg_r {
                                gr[r * cols + j] += gmsg * sv;
                            }
                        }
                    }
                    if rg_s {
                        let buf = self.grad_buf(&mut grads, *states);
                        for (o, v) in buf.iter_mut().zip(gs.iter()) {
                            *o += v;
                        }
                    }
                    if rg_r {
                        let buf = self.grad_buf(&mut grads, *rel);
                        for (o, v) in buf.iter_mut().zip(gr.iter()) {
                            *o += v;
                        }
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    if self.rg(*logits) {
                        let vl = self.nodes[logits.0].value.clone();
                        let targets = targets.clone();
                        let gl = self.grad_buf(&mut grads, *logits);
                        for (i, v) in g.iter().enumerate() {
                            let s = sigmoid(vl.data()[i]);
                            gl[i] += v * (s - targets.data()[i]);
                        }
                    }
                }
                Op::SumAll(a) => {
                    if self.rg(*a) {
                        let ga = self.grad_buf(&mut grads, *a);
                        for o in ga.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                Op::MeanAll(a) => {
                    if self.rg(*a) {
                        let n = self.nodes[a.0].value.len().max(1) as f64;
                        let ga = self.grad_buf(&mut grads, *a);
                        for o in ga.iter_mut() {
                            *o += g[0] / n;
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| (n.value.rows(), n.value.cols()))
                .collect(),
            grads,
        })
    }

    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> &'g mut Vec<f64> {
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.len()]);
        }
        grads[id.0].as_mut().unwrap()
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a node (zero matrix if it never received one).
    pub fn get(&self, id: NodeId) -> Matrix {
        let (r, c) = self.shapes[id.0];
        match &self.grads[id.0] {
            Some(g) => Matrix::from_vec(r, c, g.clone()),
            None => Matrix::zeros(r, c),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn layer_norm_forward(x: &Matrix) -> Matrix {
    let (rows, cols) = x.shape();
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols.max(1) as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols.max(1) as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..cols {
            data[i * cols + j] = (row[j] - mean) * inv;
        }
    }
    Matrix::from_vec(rows, cols, data)
}

fn layer_norm_backward(x: &Matrix, y: &Matrix, g: &[f64], gx: &mut [f64]) {
    let (rows, cols) = x.shape();
    let n = cols.max(1) as f64;
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let gr = &g[i * cols..(i + 1) * cols];
        let yr = y.row(i);
        let gmean = gr.iter().sum::<f64>() / n;
        let gy = gr
            .iter()
            .zip(yr.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n;
        for j in 0..cols {
            gx[i * cols + j] += inv * (gr[j] - gmean - yr[j] * gy);
        }
    }
}

/// mean = sum/n; std = sqrt(var + eps) - sqrt(eps) with population variance,
/// so a zero-variance (or empty) message set yields exactly zero.
fn finalize_mean_std(
    sum: &[f64],
    sumsq: &[f64],
    count: &[u32],
    rows: usize,
    cols: usize,
) -> Matrix {
    let mut data = vec![0.0; rows * 2 * cols];
    let shift = STD_EPS.sqrt();
    for i in 0..rows {
        let n = count[i];
        if n == 0 {
            continue;
        }
        let nf = n as f64;
        for j in 0..cols {
            let mean = sum[i * cols + j] / nf;
            let var = (sumsq[i * cols + j] / nf - mean * mean).max(0.0);
            data[i * 2 * cols + j] = mean;
            data[i * 2 * cols + cols + j] = (var + STD_EPS).sqrt() - shift;
        }
    }
    Matrix::from_vec(rows, 2 * cols, data)
}

// ---------------------------------------------------------------------------
// Finite-difference harness
// ---------------------------------------------------------------------------

/// Central-difference check of analytic gradients. For each parameter tensor
/// at most `MAX_COORDS_PER_TENSOR` coordinates are probed (seeded subsample).
/// Returns the worst relative error `|ad - fd| / max(|fd|, 0.1)`; with that
/// floor a result below 1e-3 certifies `|ad - fd| <= max(1e-4, 1e-3 |fd|)`.
pub const MAX_COORDS_PER_TENSOR: usize = 512;

pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Matrix],
    analytic: &[Matrix],
    h: f64,
    seed: u64,
) -> f64
where
    F: FnMut(&[Matrix]) -> f64,
{
    use rand::SeedableRng;
    assert_eq!(params.len(), analytic.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let total = p.len();
        let coords: Vec<usize> = if total <= MAX_COORDS_PER_TENSOR {
            (0..total).collect()
        } else {
            let mut all: Vec<usize> = (0..total).collect();
            for i in 0..MAX_COORDS_PER_TENSOR {
                let j = rng.random_range(i..total);
                all.swap(i, j);
            }
            all.truncate(MAX_COORDS_PER_TENSOR);
            all
        };
        for idx in coords {
            let (i, j) = (idx / p.cols(), idx % p.cols());
            let mut plus = params.to_vec();
            plus[pi] = p.perturbed(i, j, h);
            let mut minus = params.to_vec();
            minus[pi] = p.perturbed(i, j, -h);
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let ad = analytic[pi].get(i, j);
            let err = (ad - fd).abs() / fd.abs().max(0.1);
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn hadamard_forward() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let b = t.constant(Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let c = t.hadamard(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 8.0]);
    }

    #[test]
    fn segment_mean_std_two_messages() {
        let mut t = Tape::new();
        let msgs = t.constant(Matrix::from_vec(2, 1, vec![2.0, 4.0]));
        let out = t.segment_mean_std(msgs, vec![0, 0], 1).unwrap();
        let v = t.value(out);
        assert_close(v.get(0, 0), 3.0, 1e-12);
        assert_close(v.get(0, 1), 1.0, 1e-3);
    }

    #[test]
    fn segment_mean_std_single_message_is_zero_std() {
        let mut t = Tape::new();
        let msgs = t.constant(Matrix::from_vec(1, 3, vec![5.0, -1.0, 0.5]));
        let out = t.segment_mean_std(msgs, vec![0], 1).unwrap();
        let v = t.value(out);
        assert_eq!(v.get(0, 3), 0.0);
        assert_eq!(v.get(0, 4), 0.0);
        assert_eq!(v.get(0, 5), 0.0);
        assert!(v.is_finite());
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_vec(1, 4, vec![1.0, 1.0, 1.0, 1.0]));
        let y = t.layer_norm(a);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(1, 1, vec![3.0]));
        let y = t.hadamard(x, x).unwrap();
        let loss = t.sum_all(y);
        let grads = t.backward(loss).unwrap();
        assert_close(grads.get(x).get(0, 0), 6.0, 1e-12);
    }

    #[test]
    fn bce_grad_at_zero_logit() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(1, 1, vec![0.0]));
        let l = t.bce_with_logits(x, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        let loss = t.sum_all(l);
        let grads = t.backward(loss).unwrap();
        assert_close(grads.get(x).get(0, 0), -0.5, 1e-12);
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 2));
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(TensorError::NotScalar(2, 2))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.hadamard(a, b).is_err());
        assert!(t.matmul(b, a).is_ok());
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn scatter_add_edge_index_out_of_range() {
        let mut t = Tape::new();
        let m = t.constant(Matrix::zeros(2, 2));
        assert!(matches!(
            t.scatter_add(m, vec![0, 5], 3),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn scatter_add_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let msgs: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let index: Vec<usize> = (0..40).map(|_| rng.random_range(0..6)).collect();

        let run = |perm: &[usize]| {
            let mut t = Tape::new();
            let m = t.constant(Matrix::from_rows(
                &perm.iter().map(|&e| msgs[e].clone()).collect::<Vec<_>>(),
            ));
            let idx: Vec<usize> = perm.iter().map(|&e| index[e]).collect();
            let out = t.scatter_add(m, idx, 6).unwrap();
            t.value(out).clone()
        };

        let forward: Vec<usize> = (0..40).collect();
        let mut reversed = forward.clone();
        reversed.reverse();
        assert!(run(&forward).max_abs_diff(&run(&reversed)) < 1e-6);
    }

    /// Shared gradcheck helper: builds a scalar loss from a graph-building
    /// closure and compares every parameter gradient to central differences.
    fn gradcheck<B>(build: B, params: Vec<Matrix>, tol: f64)
    where
        B: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let run = |ps: &[Matrix]| -> (f64, Vec<Matrix>) {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = ps.iter().map(|p| t.param(p.clone())).collect();
            let loss = build(&mut t, &ids);
            let g = t.backward(loss).unwrap();
            (
                t.value(loss).scalar(),
                ids.iter().map(|&i| g.get(i)).collect(),
            )
        };
        let (_, analytic) = run(&params);
        let worst = finite_diff_check(
            |ps| run(ps).0,
            &params,
            &analytic,
            1e-5,
            42,
        );
        assert!(worst < tol, "gradcheck failed: worst rel err {worst}");
    }

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn gradcheck_matmul_add_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            rand_matrix(3, 4, &mut rng),
            rand_matrix(4, 2, &mut rng),
            rand_matrix(1, 2, &mut rng),
        ];
        gradcheck(
            |t, ids| {
                let y = t.matmul(ids[0], ids[1]).unwrap();
                let y = t.add_row(y, ids[2]).unwrap();
                let y = t.sigmoid(y);
                t.sum_all(y)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn gradcheck_layer_norm_relu_mulrow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Shift inputs away from the ReLU kink so central differences are clean.
        let base = rand_matrix(4, 6, &mut rng);
        let shifted = Matrix::from_vec(
            4,
            6,
            base.data()
                .iter()
                .map(|v| v + if *v >= 0.0 { 0.3 } else { -0.3 })
                .collect(),
        );
        let params = vec![shifted, rand_matrix(1, 6, &mut rng)];
        gradcheck(
            |t, ids| {
                let y = t.layer_norm(ids[0]);
                let y = t.mul_row(y, ids[1]).unwrap();
                let y = t.relu(y);
                t.mean_all(y)
            },
            params,
            1e-4,
        );
    }

    #[test]
    fn gradcheck_segment_mean_std_and_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![rand_matrix(7, 3, &mut rng)];
        let index = vec![0usize, 0, 1, 2, 2, 2, 4];
        gradcheck(
            move |t, ids| {
                let agg = t.segment_mean_std(ids[0], index.clone(), 5).unwrap();
                let s = t.scatter_add(ids[0], index.clone(), 5).unwrap();
                let cat = t.concat_cols(agg, s).unwrap();
                let y = t.sigmoid(cat);
                t.sum_all(y)
            },
            params,
            1e-5,
        );
    }

    #[test]
    fn gradcheck_edge_agg_matches_unfused_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states = rand_matrix(5, 3, &mut rng);
        let rels = rand_matrix(2, 3, &mut rng);
        let edges = Arc::new(EdgeList::new(
            5,
            vec![0, 1, 2, 3, 0, 4],
            vec![0, 1, 0, 1, 1, 0],
            vec![1, 1, 3, 3, 3, 0],
        ));

        // Fused
        let mut t = Tape::new();
        let s = t.param(states.clone());
        let r = t.param(rels.clone());
        let fused = t.edge_agg(s, r, edges.clone()).unwrap();
        let y = t.sigmoid(fused);
        let loss = t.sum_all(y);
        let g = t.backward(loss).unwrap();
        let fused_val = t.value(fused).clone();
        let (gs_f, gr_f) = (g.get(s), g.get(r));

        // Unfused: gather per-edge rows, hadamard, segment_mean_std
        let mut t2 = Tape::new();
        let s2 = t2.param(states.clone());
        let r2 = t2.param(rels.clone());
        let src: Vec<usize> = edges.src.iter().map(|&v| v as usize).collect();
        let rel: Vec<usize> = edges.rel.iter().map(|&v| v as usize).collect();
        let dst: Vec<usize> = edges.dst.iter().map(|&v| v as usize).collect();
        let hs = t2.select_rows(s2, src).unwrap();
        let hr = t2.select_rows(r2, rel).unwrap();
        let msgs = t2.hadamard(hs, hr).unwrap();
        let agg = t2.segment_mean_std(msgs, dst, 5).unwrap();
        let y2 = t2.sigmoid(agg);
        let loss2 = t2.sum_all(y2);
        let g2 = t2.backward(loss2).unwrap();

        assert!(fused_val.max_abs_diff(t2.value(agg)) < 1e-12);
        assert!(gs_f.max_abs_diff(&g2.get(s2)) < 1e-10);
        assert!(gr_f.max_abs_diff(&g2.get(r2)) < 1e-10);

        // And against finite differences.
        gradcheck(
            move |t, ids| {
                let agg = t.edge_agg(ids[0], ids[1], edges.clone()).unwrap();
                let y = t.sigmoid(agg);
                t.sum_all(y)
            },
            vec![states, rels],
            1e-5,
        );
    }

    #[test]
    fn gradcheck_bce_select_scatter_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![rand_matrix(4, 3, &mut rng), rand_matrix(1, 3, &mut rng)];
        gradcheck(
            |t, ids| {
                let init = t
                    .scatter_rows(ids[1], vec![0, 2], vec![0, 0], 4)
                    .unwrap();
                let x = t.add(ids[0], init).unwrap();
                let sel = t.select_rows(x, vec![1, 2, 3]).unwrap();
                let l = t
                    .bce_with_logits(sel, Matrix::from_vec(3, 3, vec![1.0; 9]))
                    .unwrap();
                t.mean_all(l)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn finite_diff_linear_model_is_exact() {
        // f(w) = sum(x ⊙ w): gradient is x, exact for central differences.
        let x = Matrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 3.0]);
        let w = Matrix::from_vec(1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        let xc = x.clone();
        let analytic = vec![x.clone()];
        let err = finite_diff_check(
            move |ps| {
                ps[0]
                    .data()
                    .iter()
                    .zip(xc.data().iter())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &[w],
            &analytic,
            1e-4,
            0,
        );
        assert!(err < 1e-8, "linear model err {err}");
    }

    #[test]
    fn finite_diff_relu_smooth_region() {
        // relu at x=0.7 (kink-free): derivative 1.
        let p = Matrix::from_vec(1, 1, vec![0.7]);
        let analytic = vec![Matrix::from_vec(1, 1, vec![1.0])];
        let err = finite_diff_check(|ps| ps[0].get(0, 0).max(0.0), &[p], &analytic, 1e-4, 0);
        assert!(err < 1e-5);
    }

    #[test]
    fn zero_states_zero_biases_stay_zero_through_agg_and_norm() {
        // An all-zero state matrix must stay exactly zero through
        // message aggregation, layer norm, relu and residual add.
        let mut t = Tape::new();
        let states = t.constant(Matrix::zeros(4, 3));
        let rels = t.constant(Matrix::filled(2, 3, 0.7));
        let edges = Arc::new(EdgeList::new(4, vec![0, 1, 2], vec![0, 1, 0], vec![1, 2, 3]));
        let agg = t.edge_agg(states, rels, edges).unwrap();
        let cat = t.concat_cols(states, agg).unwrap();
        let w = t.constant(Matrix::filled(9, 3, 0.5));
        let z = t.matmul(cat, w).unwrap();
        let y = t.layer_norm(z);
        let y = t.relu(y);
        let out = t.add(states, y).unwrap();
        assert_eq!(t.value(out).data(), &[0.0; 12]);
    }
}
