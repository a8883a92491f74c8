//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] is built fresh for every optimization step: leaves hold
//! parameters (gradients wanted), constants hold batch data and stored
//! targets (no gradients), and each operation appends a node whose value is
//! computed eagerly. [`Graph::backward`] walks the tape in reverse from a
//! scalar loss and accumulates gradients into every reachable leaf.
//!
//! Conventions at non-differentiable points: relu'(0) = 0, d|x|/dx at 0 = 0,
//! sqrt'(0) = 0, and row maxima break ties toward the lowest column index.
//! Repeated `backward` calls without [`Graph::zero_grad`] accumulate, each
//! call contributing one full pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    DivRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Powi(NodeId, i32),
    RowSum(NodeId),
    RowMax(NodeId, Vec<usize>),
    ColMean(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2NormalizeRows(NodeId, Vec<f64>),
    Diag(NodeId),
    Pick(NodeId, Vec<usize>),
    MutualInfo(NodeId, NodeId),
    NtXent(NodeId, usize),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// ─── plain kernels, shared with the inference path ───

pub(crate) fn matmul_plain(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Numerically stable row softmax. The max shift keeps rows summing to one
/// even for logits of magnitude around 1e3.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
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

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.rows, n.cols, n.data.clone()).expect("node shapes are valid")
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ─── inputs ───

    /// Inserts a differentiable input; `backward` accumulates into its grad.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Inserts a constant; gradients never flow into it.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Constant, false)
    }

    // ─── ops ───

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul {m}x{k} by {k2}x{n}"
            )));
        }
        let data = matmul_plain(&self.node(a).data, m, k, &self.node(b).data, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, data, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.node(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(c, r, data, Op::Transpose(a), ng)
    }

    /// Stacks `a` on top of `b`; column counts must match.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ca != cb {
            return Err(Error::ShapeMismatch(format!(
                "concat_rows {ra}x{ca} with {rb}x{cb}"
            )));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(&self.node(a).data);
        data.extend_from_slice(&self.node(b).data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(ra + rb, ca, data, Op::ConcatRows(a, b), ng))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::ShapeMismatch(format!(
                "{what} {}x{} with {}x{}",
                da.0, da.1, db.0, db.1
            )));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, data, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, data, Op::Mul(a, b), ng))
    }

    fn row_arg_check(&self, a: NodeId, r: NodeId, what: &str) -> Result<(usize, usize)> {
        let (ar, ac) = self.dims(a);
        let (rr, rc) = self.dims(r);
        if rr != 1 || rc != ac {
            return Err(Error::ShapeMismatch(format!(
                "{what} {ar}x{ac} with row {rr}x{rc}"
            )));
        }
        Ok((ar, ac))
    }

    /// Adds a 1xC row vector to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.row_arg_check(a, r, "add_row")?;
        let row = self.node(r).data.clone();
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + row[i % ac])
            .collect();
        let ng = self.needs(a) || self.needs(r);
        Ok(self.push(ar, ac, data, Op::AddRow(a, r), ng))
    }

    pub fn sub_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.row_arg_check(a, r, "sub_row")?;
        let row = self.node(r).data.clone();
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x - row[i % ac])
            .collect();
        let ng = self.needs(a) || self.needs(r);
        Ok(self.push(ar, ac, data, Op::SubRow(a, r), ng))
    }

    pub fn div_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.row_arg_check(a, r, "div_row")?;
        let row = self.node(r).data.clone();
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x / row[i % ac])
            .collect();
        let ng = self.needs(a) || self.needs(r);
        Ok(self.push(ar, ac, data, Op::DivRow(a, r), ng))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * factor).collect();
        let ng = self.needs(a);
        self.push(r, c, data, Op::Scale(a, factor), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x + value).collect();
        let ng = self.needs(a);
        self.push(r, c, data, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(r, c, data, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.exp()).collect();
        let ng = self.needs(a);
        self.push(r, c, data, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.ln()).collect();
        let ng = self.needs(a);
        self.push(r, c, data, Op::Ln(a), ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.abs()).collect();
        let ng = self.needs(a);
        self.push(r, c, data, Op::Abs(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.sqrt()).collect();
        let ng = self.needs(a);
        self.push(r, c, data, Op::Sqrt(a), ng)
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x.powi(n)).collect();
        let ng = self.needs(a);
        self.push(r, c, data, Op::Powi(a, n), ng)
    }

    /// BxC -> Bx1, sum over each row.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.node(a).data;
        let data: Vec<f64> = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.needs(a);
        self.push(r, 1, data, Op::RowSum(a), ng)
    }

    /// BxC -> Bx1, max over each row; ties break toward the lowest index.
    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            arg.push(best);
        }
        let ng = self.needs(a);
        self.push(r, 1, data, Op::RowMax(a, arg), ng)
    }

    /// BxC -> 1xC, mean over the batch dimension.
    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.node(a).data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let ng = self.needs(a);
        self.push(1, c, data, Op::ColMean(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.node(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a).data.len();
        let s: f64 = self.node(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s / n as f64], Op::MeanAll(a), ng)
    }

    /// Row-wise softmax. Errors if any input entry is non-finite.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let src = &self.node(a).data;
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&src[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let ng = self.needs(a);
        Ok(self.push(r, c, data, Op::Softmax(a), ng))
    }

    /// Row-wise log-softmax via the shifted log-sum-exp.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let src = &self.node(a).data;
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(r, c, data, Op::LogSoftmax(a), ng))
    }

    /// Scales each row to unit Euclidean norm. A zero row has no direction,
    /// so it is rejected rather than silently mapped anywhere.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let src = &self.node(a).data;
        let mut data = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegeneratePrediction);
            }
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let ng = self.needs(a);
        Ok(self.push(r, c, data, Op::L2NormalizeRows(a, norms), ng))
    }

    /// NxN -> Nx1 main diagonal.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if r != c {
            return Err(Error::ShapeMismatch(format!("diag of {r}x{c}")));
        }
        let src = &self.node(a).data;
        let data: Vec<f64> = (0..r).map(|i| src[i * c + i]).collect();
        let ng = self.needs(a);
        Ok(self.push(r, 1, data, Op::Diag(a), ng))
    }

    /// BxC -> Bx1, element `labels[b]` of each row.
    pub fn pick(&mut self, a: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if labels.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "pick needs {r} labels, got {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let src = &self.node(a).data;
        let data: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| src[i * c + l]).collect();
        let ng = self.needs(a);
        Ok(self.push(r, 1, data, Op::Pick(a, labels.to_vec()), ng))
    }

    /// Negative mutual information of the symmetrized joint built from two
    /// batches of categorical distributions (rows of `a` and `b`):
    /// P = (A'B + B'A) / 2N, with marginals taken by summing rows/columns
    /// and the 0 ln 0 = 0 convention. Returns a 1x1 node.
    pub fn mutual_information(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c) = self.same_shape(a, b, "mutual_information")?;
        let p = self.mi_joint(a, b, n, c);
        let (rm, cm) = mi_marginals(&p, c);
        let mut info = 0.0;
        for k in 0..c {
            for l in 0..c {
                let pkl = p[k * c + l];
                if pkl > 0.0 {
                    info += pkl * (pkl.ln() - rm[k].ln() - cm[l].ln());
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(1, 1, vec![-info], Op::MutualInfo(a, b), ng))
    }

    fn mi_joint(&self, a: NodeId, b: NodeId, n: usize, c: usize) -> Vec<f64> {
        let da = &self.node(a).data;
        let db = &self.node(b).data;
        let mut p = vec![0.0; c * c];
        // (A'B + B'A) accumulated row by row keeps the construction exactly
        // symmetric under argument swap.
        for i in 0..n {
            let ra = &da[i * c..(i + 1) * c];
            let rb = &db[i * c..(i + 1) * c];
            for k in 0..c {
                for l in 0..c {
                    p[k * c + l] += ra[k] * rb[l] + rb[k] * ra[l];
                }
            }
        }
        let scale = 1.0 / (2.0 * n as f64);
        for v in p.iter_mut() {
            *v *= scale;
        }
        p
    }

    /// Normalized-temperature cross entropy over a (2B)x(2B) similarity
    /// matrix whose first B rows are one view and last B rows the other.
    /// Row i is the anchor, its positive sits at (i + B) mod 2B, and every
    /// other row except the anchor itself is a negative. Returns 1x1.
    pub fn nt_xent(&mut self, sims: NodeId, half: usize) -> Result<NodeId> {
        let (r, c) = self.dims(sims);
        if r != c || r != 2 * half || half == 0 {
            return Err(Error::ShapeMismatch(format!(
                "nt_xent needs a 2Bx2B matrix with B = {half}, got {r}x{c}"
            )));
        }
        let s = &self.node(sims).data;
        let mut loss = 0.0;
        for i in 0..r {
            let pos = (i + half) % r;
            let row = &s[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if j != i && v > max {
                    max = v;
                }
            }
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if j != i {
                    denom += (v - max).exp();
                }
            }
            loss += max + denom.ln() - row[pos];
        }
        let ng = self.needs(sims);
        Ok(self.push(1, 1, vec![loss / r as f64], Op::NtXent(sims, half), ng))
    }

    // ─── backward ───

    /// Accumulates one full gradient pass from a scalar `loss` into `.grad`
    /// of every node that requires gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (r, c) = self.dims(loss);
        if r != 1 || c != 1 {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        tmp[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(up) = tmp[i].take() else { continue };
            self.propagate(i, &up, &mut tmp);
            match &mut self.nodes[i].grad {
                Some(g) => {
                    for (gv, uv) in g.iter_mut().zip(&up) {
                        *gv += uv;
                    }
                }
                slot => *slot = Some(up),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, up: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let add_to = |tmp: &mut [Option<Vec<f64>>], id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let n = &self.nodes[id.0];
            let slot = tmp[id.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]);
            f(slot);
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                // dA = U B', dB = A' U
                add_to(tmp, *a, &mut |ga| {
                    let db = &self.nodes[b.0].data;
                    for ii in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += up[ii * n + j] * db[p * n + j];
                            }
                            ga[ii * k + p] += acc;
                        }
                    }
                });
                add_to(tmp, *b, &mut |gb| {
                    let da = &self.nodes[a.0].data;
                    for p in 0..k {
                        for ii in 0..m {
                            let av = da[ii * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * up[ii * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                add_to(tmp, *a, &mut |ga| {
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += up[j * r + ii];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].data.len();
                add_to(tmp, *a, &mut |ga| {
                    for (g, u) in ga.iter_mut().zip(&up[..na]) {
                        *g += u;
                    }
                });
                add_to(tmp, *b, &mut |gb| {
                    for (g, u) in gb.iter_mut().zip(&up[na..]) {
                        *g += u;
                    }
                });
            }
            Op::Add(a, b) => {
                add_to(tmp, *a, &mut |ga| {
                    for (g, u) in ga.iter_mut().zip(up) {
                        *g += u;
                    }
                });
                add_to(tmp, *b, &mut |gb| {
                    for (g, u) in gb.iter_mut().zip(up) {
                        *g += u;
                    }
                });
            }
            Op::Sub(a, b) => {
                add_to(tmp, *a, &mut |ga| {
                    for (g, u) in ga.iter_mut().zip(up) {
                        *g += u;
                    }
                });
                add_to(tmp, *b, &mut |gb| {
                    for (g, u) in gb.iter_mut().zip(up) {
                        *g -= u;
                    }
                });
            }
            Op::Mul(a, b) => {
                add_to(tmp, *a, &mut |ga| {
                    let db = &self.nodes[b.0].data;
                    for ((g, u), v) in ga.iter_mut().zip(up).zip(db) {
                        *g += u * v;
                    }
                });
                add_to(tmp, *b, &mut |gb| {
                    let da = &self.nodes[a.0].data;
                    for ((g, u), v) in gb.iter_mut().zip(up).zip(da) {
                        *g += u * v;
                    }
                });
            }
            Op::AddRow(a, r) | Op::SubRow(a, r) => {
                let sign = if matches!(node.op, Op::AddRow(..)) {
                    1.0
                } else {
                    -1.0
                };
                add_to(tmp, *a, &mut |ga| {
                    for (g, u) in ga.iter_mut().zip(up) {
                        *g += u;
                    }
                });
                let c = node.cols;
                add_to(tmp, *r, &mut |gr| {
                    for (idx, u) in up.iter().enumerate() {
                        gr[idx % c] += sign * u;
                    }
                });
            }
            Op::DivRow(a, r) => {
                let c = node.cols;
                let row = &self.nodes[r.0].data;
                add_to(tmp, *a, &mut |ga| {
                    for (idx, u) in up.iter().enumerate() {
                        ga[idx] += u / row[idx % c];
                    }
                });
                add_to(tmp, *r, &mut |gr| {
                    let da = &self.nodes[a.0].data;
                    for (idx, u) in up.iter().enumerate() {
                        let j = idx % c;
                        gr[j] -= u * da[idx] / (row[j] * row[j]);
                    }
                });
            }
            Op::Scale(a, f) => {
                let f = *f;
                add_to(tmp, *a, &mut |ga| {
                    for (g, u) in ga.iter_mut().zip(up) {
                        *g += f * u;
                    }
                });
            }
            Op::AddScalar(a) => {
                add_to(tmp, *a, &mut |ga| {
                    for (g, u) in ga.iter_mut().zip(up) {
                        *g += u;
                    }
                });
            }
            Op::Relu(a) => {
                let da = &self.nodes[a.0].data;
                add_to(tmp, *a, &mut |ga| {
                    for ((g, u), &x) in ga.iter_mut().zip(up).zip(da) {
                        if x > 0.0 {
                            *g += u;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                add_to(tmp, *a, &mut |ga| {
                    for ((g, u), y) in ga.iter_mut().zip(up).zip(&node.data) {
                        *g += u * y;
                    }
                });
            }
            Op::Ln(a) => {
                let da = &self.nodes[a.0].data;
                add_to(tmp, *a, &mut |ga| {
                    for ((g, u), &x) in ga.iter_mut().zip(up).zip(da) {
                        *g += u / x;
                    }
                });
            }
            Op::Abs(a) => {
                let da = &self.nodes[a.0].data;
                add_to(tmp, *a, &mut |ga| {
                    for ((g, u), &x) in ga.iter_mut().zip(up).zip(da) {
                        *g += u * if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::Sqrt(a) => {
                add_to(tmp, *a, &mut |ga| {
                    for ((g, u), &y) in ga.iter_mut().zip(up).zip(&node.data) {
                        if y > 0.0 {
                            *g += u / (2.0 * y);
                        }
                    }
                });
            }
            Op::Powi(a, n) => {
                let n = *n;
                let da = &self.nodes[a.0].data;
                add_to(tmp, *a, &mut |ga| {
                    for ((g, u), &x) in ga.iter_mut().zip(up).zip(da) {
                        *g += u * n as f64 * x.powi(n - 1);
                    }
                });
            }
            Op::RowSum(a) => {
                let c = self.dims(*a).1;
                add_to(tmp, *a, &mut |ga| {
                    for (idx, g) in ga.iter_mut().enumerate() {
                        *g += up[idx / c];
                    }
                });
            }
            Op::RowMax(a, arg) => {
                let c = self.dims(*a).1;
                add_to(tmp, *a, &mut |ga| {
                    for (ii, &j) in arg.iter().enumerate() {
                        ga[ii * c + j] += up[ii];
                    }
                });
            }
            Op::ColMean(a) => {
                let (r, c) = self.dims(*a);
                let inv = 1.0 / r as f64;
                add_to(tmp, *a, &mut |ga| {
                    for (idx, g) in ga.iter_mut().enumerate() {
                        *g += up[idx % c] * inv;
                    }
                });
            }
            Op::SumAll(a) => {
                add_to(tmp, *a, &mut |ga| {
                    for g in ga.iter_mut() {
                        *g += up[0];
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].data.len();
                let u = up[0] / n as f64;
                add_to(tmp, *a, &mut |ga| {
                    for g in ga.iter_mut() {
                        *g += u;
                    }
                });
            }
            Op::Softmax(a) => {
                let (r, c) = self.dims(*a);
                add_to(tmp, *a, &mut |ga| {
                    for ii in 0..r {
                        let y = &node.data[ii * c..(ii + 1) * c];
                        let u = &up[ii * c..(ii + 1) * c];
                        let dot: f64 = y.iter().zip(u).map(|(yv, uv)| yv * uv).sum();
                        for j in 0..c {
                            ga[ii * c + j] += y[j] * (u[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (r, c) = self.dims(*a);
                add_to(tmp, *a, &mut |ga| {
                    for ii in 0..r {
                        let y = &node.data[ii * c..(ii + 1) * c];
                        let u = &up[ii * c..(ii + 1) * c];
                        let usum: f64 = u.iter().sum();
                        for j in 0..c {
                            ga[ii * c + j] += u[j] - y[j].exp() * usum;
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a, norms) => {
                let (r, c) = self.dims(*a);
                add_to(tmp, *a, &mut |ga| {
                    for ii in 0..r {
                        let y = &node.data[ii * c..(ii + 1) * c];
                        let u = &up[ii * c..(ii + 1) * c];
                        let dot: f64 = y.iter().zip(u).map(|(yv, uv)| yv * uv).sum();
                        let inv = 1.0 / norms[ii];
                        for j in 0..c {
                            ga[ii * c + j] += (u[j] - y[j] * dot) * inv;
                        }
                    }
                });
            }
            Op::Diag(a) => {
                let c = self.dims(*a).1;
                add_to(tmp, *a, &mut |ga| {
                    for (ii, u) in up.iter().enumerate() {
                        ga[ii * c + ii] += u;
                    }
                });
            }
            Op::Pick(a, labels) => {
                let c = self.dims(*a).1;
                add_to(tmp, *a, &mut |ga| {
                    for (ii, &l) in labels.iter().enumerate() {
                        ga[ii * c + l] += up[ii];
                    }
                });
            }
            Op::MutualInfo(a, b) => {
                let (n, c) = self.dims(*a);
                let p = self.mi_joint(*a, *b, n, c);
                let (rm, cm) = mi_marginals(&p, c);
                // d(-I)/dP_kl = 1 - ln(P_kl / (r_k c_l)); cells with P = 0
                // contribute nothing (consistent with 0 ln 0 = 0).
                let mut gp = vec![0.0; c * c];
                for k in 0..c {
                    for l in 0..c {
                        let pkl = p[k * c + l];
                        if pkl > 0.0 {
                            gp[k * c + l] = 1.0 - (pkl.ln() - rm[k].ln() - cm[l].ln());
                        }
                    }
                }
                // gsym = (G + G') / 2N; dA = B gsym', dB = A gsym (gsym is
                // symmetric, kept explicit for clarity).
                let inv = 1.0 / (2.0 * n as f64);
                let mut gsym = vec![0.0; c * c];
                for k in 0..c {
                    for l in 0..c {
                        gsym[k * c + l] = (gp[k * c + l] + gp[l * c + k]) * inv;
                    }
                }
                let u = up[0];
                add_to(tmp, *a, &mut |ga| {
                    let db = &self.nodes[b.0].data;
                    for ii in 0..n {
                        for k in 0..c {
                            let mut acc = 0.0;
                            for l in 0..c {
                                acc += db[ii * c + l] * gsym[k * c + l];
                            }
                            ga[ii * c + k] += u * acc;
                        }
                    }
                });
                add_to(tmp, *b, &mut |gb| {
                    let da = &self.nodes[a.0].data;
                    for ii in 0..n {
                        for k in 0..c {
                            let mut acc = 0.0;
                            for l in 0..c {
                                acc += da[ii * c + l] * gsym[l * c + k];
                            }
                            gb[ii * c + k] += u * acc;
                        }
                    }
                });
            }
            Op::NtXent(sims, half) => {
                let r = 2 * half;
                let s = &self.nodes[sims.0].data;
                let u = up[0] / r as f64;
                add_to(tmp, *sims, &mut |gs| {
                    for ii in 0..r {
                        let pos = (ii + half) % r;
                        let row = &s[ii * r..(ii + 1) * r];
                        let mut max = f64::NEG_INFINITY;
                        for (j, &v) in row.iter().enumerate() {
                            if j != ii && v > max {
                                max = v;
                            }
                        }
                        let mut denom = 0.0;
                        for (j, &v) in row.iter().enumerate() {
                            if j != ii {
                                denom += (v - max).exp();
                            }
                        }
                        for (j, &v) in row.iter().enumerate() {
                            if j != ii {
                                gs[ii * r + j] += u * (v - max).exp() / denom;
                            }
                        }
                        gs[ii * r + pos] -= u;
                    }
                });
            }
        }
    }
}

fn mi_marginals(p: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; c];
    let mut cols = vec![0.0; c];
    for k in 0..c {
        for l in 0..c {
            rows[k] += p[k * c + l];
            cols[l] += p[k * c + l];
        }
    }
    (rows, cols)
}

// ─── finite-difference gradient checking ───

/// Compares the graph gradient of `build` at `point` against central finite
/// differences and returns the worst relative error, defined per coordinate
/// as |analytic - central| / max(1, |central|). `build` receives a fresh
/// graph and the input node and must return a scalar loss node.
pub fn check_gradients<F>(build: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }

    let mut g = Graph::new();
    let x = g.leaf(point);
    let loss = build(&mut g, x)?;
    let (r, c) = g.dims(loss);
    if r != 1 || c != 1 {
        return Err(Error::NonScalarLoss { rows: r, cols: c });
    }
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(grad) => grad.to_vec(),
        None => vec![0.0; point.numel()],
    };

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let loss = build(&mut g, x)?;
        Ok(g.data(loss)[0])
    };

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (f_plus - f_minus) / (2.0 * epsilon);
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        let data: Vec<f64> = (0..r * c).map(|_| (rng.random::<f64>() - 0.5) * 2.0 * scale).collect();
        Tensor::new(r, c, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(1, 2, vec![0.0, 0.0]).unwrap());
        let s = g.softmax(x).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);

        let x3 = g.constant(&Tensor::new(1, 3, vec![7.0, 7.0, 7.0]).unwrap());
        let s3 = g.softmax(x3).unwrap();
        for &v in g.data(s3) {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(&random_tensor(&mut rng, 6, 9, 1e3));
        let s = g.softmax(x).unwrap();
        for i in 0..6 {
            let row_sum: f64 = g.data(s)[i * 9..(i + 1) * 9].iter().sum();
            assert_close(row_sum, 1.0, 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(1, 2, vec![f64::NAN, 0.0]).unwrap());
        let err = g.softmax(x).unwrap_err();
        assert!(err.to_string().contains("non-finite logits"));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(1, 2, vec![3.0, 4.0]).unwrap());
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.data(y), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_is_identity_on_unit_vectors() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap());
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let err = g.l2_normalize_rows(x).unwrap_err();
        assert!(err.to_string().contains("degenerate prediction vector"));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap());
        let loss = g.sum_all(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_squared_norm_is_identity() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::new(1, 4, vec![1.0, -2.0, 3.0, 0.25]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap();
        let grad = g.grad(w).unwrap();
        for (gv, xv) in grad.iter().zip([1.0, -2.0, 3.0, 0.25]) {
            assert_close(*gv, xv, 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::new(2, 2, vec![1.0; 4]).unwrap());
        let y = g.relu(w);
        assert!(matches!(
            g.backward(y),
            Err(Error::NonScalarLoss { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = sum(w + w) => dy/dw = 2 everywhere.
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let doubled = g.add(w, w).unwrap();
        let loss = g.sum_all(doubled);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_full_passes() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::new(1, 2, vec![4.0, -1.0]).unwrap());
        let loss = g.sum_all(w);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::new(1, 2, vec![1.0, 2.0]).unwrap());
        let c = g.constant(&Tensor::new(1, 2, vec![3.0, 4.0]).unwrap());
        let prod = g.mul(w, c).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn composite_expression_matches_finite_differences() {
        // loss = mean(relu(X W + b)^2) exercised through the checker.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, 4, 3, 1.0);
        let w0 = random_tensor(&mut rng, 3, 5, 1.0);
        let b0 = random_tensor(&mut rng, 1, 5, 0.5);
        let err = check_gradients(
            |g, wid| {
                let xc = g.constant(&x);
                let bc = g.constant(&b0);
                let h = g.matmul(xc, wid)?;
                let h = g.add_row(h, bc)?;
                let h = g.relu(h);
                let sq = g.mul(h, h)?;
                Ok(g.mean_all(sq))
            },
            &w0,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn gradient_of_constant_function_is_zero() {
        let point = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = check_gradients(
            |g, _x| {
                let c = g.constant(&Tensor::scalar(5.0));
                Ok(g.scale(c, 2.0))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn check_gradients_rejects_bad_epsilon() {
        let point = Tensor::scalar(1.0);
        assert!(check_gradients(|g, x| Ok(g.sum_all(x)), &point, 0.0).is_err());
        assert!(check_gradients(|g, x| Ok(g.sum_all(x)), &point, -1e-4).is_err());
    }

    #[test]
    fn row_max_breaks_ties_toward_first_index() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::new(1, 3, vec![2.0, 2.0, 1.0]).unwrap());
        let m = g.row_max(w);
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(2, 3));
        let b = g.constant(&Tensor::zeros(4, 2));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn elementwise_ops_reject_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(2, 3));
        let b = g.constant(&Tensor::zeros(3, 2));
        assert!(g.add(a, b).is_err());
        assert!(g.sub(a, b).is_err());
        assert!(g.mul(a, b).is_err());
    }

    #[test]
    fn pick_rejects_out_of_range_labels() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(2, 3));
        assert!(matches!(
            g.pick(a, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn assorted_primitives_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        type Build = fn(&mut Graph, NodeId) -> Result<NodeId>;
        let builders: Vec<(&str, Build)> = vec![
            ("exp_mean", |g, x| {
                let e = g.exp(x);
                Ok(g.mean_all(e))
            }),
            ("log_softmax_sum", |g, x| {
                let l = g.log_softmax(x)?;
                let sq = g.mul(l, l)?;
                Ok(g.sum_all(sq))
            }),
            ("softmax_weighted", |g, x| {
                let s = g.softmax(x)?;
                let p = g.powi(s, 2);
                Ok(g.sum_all(p))
            }),
            ("row_ops", |g, x| {
                let m = g.col_mean(x);
                let c = g.sub_row(x, m)?;
                let sq = g.mul(c, c)?;
                let rs = g.row_sum(sq);
                let sr = g.sqrt(rs);
                Ok(g.mean_all(sr))
            }),
            ("transpose_matmul", |g, x| {
                let t = g.transpose(x);
                let p = g.matmul(t, x)?;
                let d = g.diag(p)?;
                Ok(g.sum_all(d))
            }),
            ("normalize_dot", |g, x| {
                let n = g.l2_normalize_rows(x)?;
                let s = g.sum_all(n);
                Ok(g.scale(s, 0.5))
            }),
        ];
        for (name, build) in builders {
            for _ in 0..5 {
                let point = random_tensor(&mut rng, 3, 4, 1.5);
                let err = check_gradients(build, &point, 1e-4).unwrap();
                assert!(err < 1e-3, "{name}: rel err {err}");
            }
        }
    }
}
