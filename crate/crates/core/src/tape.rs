//! A small matrix-valued reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological traversal. Parameters are leaves that
//! remember their offset into a flat parameter vector; [`Graph::backward`]
//! scatters their adjoints back into a gradient of that flat vector.
//!
//! Every op evaluates row `i` of its output from rows `≤ i` of its inputs
//! only (or from whole parameter matrices), which is what makes the causal
//! attention in the sequence model exactly invariant to suffix edits.

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn scalar(v: f64) -> Self {
        Matrix::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub fn matmul_t(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_t inner dims");
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            out.data[i * b.rows + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
pub fn t_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "t_matmul inner dims");
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    ClampMin(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(NodeId),
    InterleaveRows(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    WeightedSum(NodeId, Matrix),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Computation graph for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows, v.cols), (1, 1), "not a scalar node");
        v.data[0]
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Leaf bound to `params[offset .. offset + rows * cols]`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> NodeId {
        let data = params[offset..offset + rows * cols].to_vec();
        self.push(Matrix::from_vec(rows, cols, data), Op::Param { offset })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "elementwise shapes");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows, va.cols, data)
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Matrix {
        let va = self.value(a);
        Matrix::from_vec(va.rows, va.cols, va.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    fn row_broadcast(&self, a: NodeId, row: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "broadcast operand must be a row");
        assert_eq!(va.cols, vr.cols, "broadcast cols");
        let mut out = va.clone();
        for r in 0..va.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *o = f(*o, b);
            }
        }
        out
    }

    /// `a + 1·row` (row broadcast over rows of `a`).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.row_broadcast(a, row, |x, y| x + y);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.row_broadcast(a, row, |x, y| x * y);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.map(a, |x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `max(a, lo)`; the adjoint is zero where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let v = self.map(a, |x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert!(g.rows == 1 && b.rows == 1 && g.cols == vx.cols && b.cols == vx.cols);
        let n = vx.cols as f64;
        let mut xhat = vec![0.0; vx.data.len()];
        let mut inv_std = vec![0.0; vx.rows];
        let mut out = Matrix::zeros(vx.rows, vx.cols);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..vx.cols {
                let h = (row[c] - mean) * inv;
                xhat[r * vx.cols + c] = h;
                out.data[r * vx.cols + c] = g.data[c] * h + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax of row `i` over columns `0..=i`; entries above the diagonal are
    /// zero and never read.
    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows, va.cols, "causal softmax expects a square score matrix");
        let n = va.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let row = &va.row(i)[..=i];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let orow = out.row_mut(i);
            for (j, &s) in row.iter().enumerate() {
                let e = (s - mx).exp();
                orow[j] = e;
                z += e;
            }
            for o in orow[..=i].iter_mut() {
                *o /= z;
            }
        }
        self.push(out, Op::CausalSoftmax(a))
    }

    /// Row `r·k + p` of the output is row `r` of `parts[p]`.
    pub fn interleave_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let k = parts.len();
        let first = self.value(parts[0]);
        let (rows, cols) = (first.rows, first.cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!((v.rows, v.cols), (rows, cols), "interleave shapes");
        }
        let mut out = Matrix::zeros(rows * k, cols);
        for r in 0..rows {
            for (p, &id) in parts.iter().enumerate() {
                out.row_mut(r * k + p).copy_from_slice(self.value(id).row(r));
            }
        }
        self.push(out, Op::InterleaveRows(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows cols");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let va = self.value(a);
        let mut out = Matrix::zeros(idx.len(), va.cols);
        for (q, &r) in idx.iter().enumerate() {
            out.row_mut(q).copy_from_slice(va.row(r));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + width <= va.cols, "slice_cols range");
        let mut out = Matrix::zeros(va.rows, width);
        for r in 0..va.rows {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows, rows, "concat_cols rows");
                out.row_mut(r)[c0..c0 + v.cols].copy_from_slice(v.row(r));
                c0 += v.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// `Σ_ij w_ij a_ij` for a constant weight matrix.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Matrix) -> NodeId {
        let va = self.value(a);
        assert_eq!((va.rows, va.cols), (weights.rows, weights.cols), "weighted_sum shapes");
        let s = va.data.iter().zip(&weights.data).map(|(x, w)| x * w).sum();
        self.push(Matrix::scalar(s), Op::WeightedSum(a, weights))
    }

    /// Reverse sweep from a scalar `output`; returns the gradient with respect
    /// to the flat parameter vector of length `num_params`.
    pub fn backward(&self, output: NodeId, num_params: usize) -> Vec<f64> {
        let mut grad = vec![0.0; num_params];
        self.backward_into(output, 1.0, &mut grad);
        grad
    }

    /// Adds `seed · ∂output/∂params` into `grad`.
    pub fn backward_into(&self, output: NodeId, seed: f64, grad: &mut [f64]) {
        let out = self.value(output);
        assert_eq!((out.rows, out.cols), (1, 1), "backward from a non-scalar node");
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::scalar(seed));
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (dst, v) in grad[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                        *dst += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = matmul_t(&g, self.value(*b));
                    let db = t_matmul(self.value(*a), &g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = matmul(&g, self.value(*b));
                    let db = t_matmul(&g, self.value(*a));
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = elementwise(&g, vb, |x, y| x * y);
                    let db = elementwise(&g, va, |x, y| x * y);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in dr.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *row, dr);
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (self.value(*a), self.value(*row));
                    let mut da = g.clone();
                    let mut dr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        let grow = g.row(r);
                        let arow = va.row(r);
                        for c in 0..g.cols {
                            da.data[r * g.cols + c] = grow[c] * vr.data[c];
                            dr.data[c] += grow[c] * arow[c];
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *row, dr);
                }
                Op::Scale(a, s) => {
                    let da = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    accumulate(&mut adj, *a, da);
                }
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::Relu(a) => {
                    let da = elementwise(&g, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                    accumulate(&mut adj, *a, da);
                }
                Op::Tanh(a) => {
                    let da = elementwise(&g, &node.value, |d, y| d * (1.0 - y * y));
                    accumulate(&mut adj, *a, da);
                }
                Op::Exp(a) => {
                    let da = elementwise(&g, &node.value, |d, y| d * y);
                    accumulate(&mut adj, *a, da);
                }
                Op::ClampMin(a, lo) => {
                    let da = elementwise(&g, self.value(*a), |d, x| if x > *lo { d } else { 0.0 });
                    accumulate(&mut adj, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.value(*gamma);
                    let cols = g.cols;
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(g.rows, cols);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    for r in 0..g.rows {
                        let grow = g.row(r);
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            dbeta.data[c] += grow[c];
                            dgamma.data[c] += grow[c] * hrow[c];
                            let dh = grow[c] * vg.data[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[c];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for c in 0..cols {
                            let dh = grow[c] * vg.data[c];
                            dx.data[r * cols + c] = inv_std[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                }
                Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let n = y.rows;
                    let mut da = Matrix::zeros(n, n);
                    for i in 0..n {
                        let yrow = &y.row(i)[..=i];
                        let grow = &g.row(i)[..=i];
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let drow = da.row_mut(i);
                        for j in 0..=i {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::InterleaveRows(parts) => {
                    let k = parts.len();
                    let rows = g.rows / k;
                    for (p, &id) in parts.iter().enumerate() {
                        let mut dp = Matrix::zeros(rows, g.cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(r * k + p));
                        }
                        accumulate(&mut adj, id, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &id in parts {
                        let rows = self.value(id).rows;
                        let dp = Matrix::from_vec(
                            rows,
                            g.cols,
                            g.data[r0 * g.cols..(r0 + rows) * g.cols].to_vec(),
                        );
                        accumulate(&mut adj, id, dp);
                        r0 += rows;
                    }
                }
                Op::GatherRows(a, idxs) => {
                    let va = self.value(*a);
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    for (q, &r) in idxs.iter().enumerate() {
                        for (d, v) in da.row_mut(r).iter_mut().zip(g.row(q)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    for r in 0..g.rows {
                        da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &id in parts {
                        let w = self.value(id).cols;
                        let mut dp = Matrix::zeros(g.rows, w);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        accumulate(&mut adj, id, dp);
                        c0 += w;
                    }
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    let da = Matrix::from_vec(va.rows, va.cols, vec![g.data[0]; va.data.len()]);
                    accumulate(&mut adj, *a, da);
                }
                Op::WeightedSum(a, w) => {
                    let s = g.data[0];
                    let da = Matrix::from_vec(w.rows, w.cols, w.data.iter().map(|v| v * s).collect());
                    accumulate(&mut adj, *a, da);
                }
            }
        }
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Offsets of named parameter blocks inside a flat parameter vector.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn bind(&self, graph: &mut Graph, params: &[f64]) -> NodeId {
        graph.param(params, self.offset, self.rows, self.cols)
    }

    pub fn matrix(&self, params: &[f64]) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, params[self.range()].to_vec())
    }
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, rows: usize, cols: usize) -> ParamSlot {
        let slot = ParamSlot {
            offset: self.total,
            rows,
            cols,
        };
        self.total += rows * cols;
        slot
    }

    pub fn total(&self) -> usize {
        self.total
    }
}
