//! The recording tape for reverse-mode differentiation.
//!
//! A forward pass pushes one node per operation; nodes only ever reference
//! earlier nodes, so the creation order is already topological and
//! [`Tape::backward`] is a single reverse sweep. Each node owns its value and
//! its gradient buffer. Leaf nodes may be linked to a [`ParamStore`] entry;
//! after backward, [`Tape::write_param_grads`] accumulates their gradients
//! back into the store.
//!
//! A tape is confined to one thread and discarded after use; parameters
//! persist in the store across tapes.

use super::kernels;
use super::{as_2d, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// [n,m] + broadcast row [m].
    AddRow { x: NodeId, row: NodeId },
    /// [n,m] ⊙ broadcast row [m].
    MulRow { x: NodeId, row: NodeId },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Per-row (x − μ)/√(var + eps); inverse σ per row saved at forward.
    NormalizeRows { x: NodeId, inv_sigma: Vec<f64> },
    SoftmaxRows(NodeId),
    /// Flat indices of surviving entries saved at forward.
    TopkMask { x: NodeId, kept: Vec<usize> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    /// Rows of x placed at `rows` in an otherwise-zero [out_rows, m] output.
    ScatterRows { x: NodeId, rows: Vec<usize> },
    /// Output row r copies row srcs[r].1 of node srcs[r].0.
    AssembleRows { srcs: Vec<(NodeId, usize)> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Mean over consecutive groups of `group` rows.
    RowGroupMean { x: NodeId, group: usize },
    /// Output row r = x row r scaled by w[rows[r], col].
    ScaleRowsByCol { x: NodeId, w: NodeId, rows: Vec<usize>, col: usize },
    ColSums(NodeId),
    /// Elementwise product with a constant mask (no gradient into the mask).
    MulMask { x: NodeId, mask: Vec<f64> },
    /// Fused softmax + mean negative log-likelihood; probs saved at forward.
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    /// Mean of −log(probs[r, target_r]) taken directly on probabilities.
    NllFromProbs { probs: NodeId, targets: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Log(..) => "log",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::TopkMask { .. } => "topk_mask",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::AssembleRows { .. } => "assemble_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::RowGroupMean { .. } => "row_group_mean",
            Op::ScaleRowsByCol { .. } => "scale_rows_by_col",
            Op::ColSums(..) => "col_sums",
            Op::MulMask { .. } => "mul_mask",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::NllFromProbs { .. } => "nll_from_probs",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward pass and replays it backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("{} produced a non-finite value", op.name())));
        }
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { shape, data, grad, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copies a tensor onto the tape as a leaf with no parameter link.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, t.requires_grad())
    }

    /// Raw constant leaf (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "constant shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.push(shape, data, Op::Leaf { param: None }, false)
    }

    /// Leases a stored parameter onto the tape; its gradient flows back to
    /// the store via [`Tape::write_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: Some(id) }, true)
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op_name: &str) -> Result<(Vec<usize>, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape(format!("{op_name}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok((sa.to_vec(), self.nodes[a.0].data.len()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.binary_same_shape(a, b, "add")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.nodes[a.0].data[i] + self.nodes[b.0].data[i];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.binary_same_shape(a, b, "sub")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.nodes[a.0].data[i] - self.nodes[b.0].data[i];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.binary_same_shape(a, b, "mul")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.nodes[a.0].data[i] * self.nodes[b.0].data[i];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.binary_same_shape(a, b, "div")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.nodes[a.0].data[i] / self.nodes[b.0].data[i];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|v| v + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::AddConst(a), rg)
    }

    /// [n,m] plus a row of width m (shape [m] or [1,m]) broadcast over
    /// every row.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(x))?;
        if self.shape(row) != [m] && self.shape(row) != [1, m] {
            return Err(Error::Shape(format!(
                "add_row: row shape {:?} does not match width {m}",
                self.shape(row)
            )));
        }
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for j in 0..m {
                out[r * m + j] = self.nodes[x.0].data[r * m + j] + self.nodes[row.0].data[j];
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(vec![n, m], out, Op::AddRow { x, row }, rg)
    }

    /// [n,m] times a row of width m (shape [m] or [1,m]) broadcast over
    /// every row.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(x))?;
        if self.shape(row) != [m] && self.shape(row) != [1, m] {
            return Err(Error::Shape(format!(
                "mul_row: row shape {:?} does not match width {m}",
                self.shape(row)
            )));
        }
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for j in 0..m {
                out[r * m + j] = self.nodes[x.0].data[r * m + j] * self.nodes[row.0].data[j];
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(vec![n, m], out, Op::MulRow { x, row }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ka) = as_2d(self.shape(a))?;
        let (kb, m) = as_2d(self.shape(b))?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: inner extents differ ({n}x{ka} · {kb}x{m})"
            )));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, n, ka, m, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![n, m], out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(a))?;
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for j in 0..m {
                out[j * n + r] = self.nodes[a.0].data[r * m + j];
            }
        }
        let rg = self.rg(a);
        self.push(vec![m, n], out, Op::Transpose(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Tanh(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Log(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].data.len();
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s / n as f64], Op::MeanAll(a), rg)
    }

    /// Per-row standardization (x − μ)/√(var + eps) with population variance;
    /// the affine layer-norm parameters are applied by callers via
    /// [`Tape::mul_row`] and [`Tape::add_row`].
    pub fn normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(x))?;
        let mut out = vec![0.0; n * m];
        let mut inv_sigma = vec![0.0; n];
        for r in 0..n {
            let row = &self.nodes[x.0].data[r * m..(r + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = inv;
            for j in 0..m {
                out[r * m + j] = (row[j] - mu) * inv;
            }
        }
        let rg = self.rg(x);
        self.push(vec![n, m], out, Op::NormalizeRows { x, inv_sigma }, rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(a))?;
        let mut out = self.nodes[a.0].data.clone();
        for r in 0..n {
            kernels::softmax_row(&mut out[r * m..(r + 1) * m]);
        }
        let rg = self.rg(a);
        self.push(vec![n, m], out, Op::SoftmaxRows(a), rg)
    }

    /// Keeps the k largest entries per row (ties to the lowest column index),
    /// zeroes the rest, and never renormalizes the survivors. The gradient
    /// flows only through surviving positions; masked positions get exact
    /// zeros.
    pub fn topk_mask(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(x))?;
        if k == 0 || k > m {
            return Err(Error::Argument(format!("top-k k={k} out of range 1..={m}")));
        }
        let mut out = vec![0.0; n * m];
        let mut kept = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = &self.nodes[x.0].data[r * m..(r + 1) * m];
            for &j in &kernels::topk_indices(row, k) {
                out[r * m + j] = row[j];
                kept.push(r * m + j);
            }
        }
        let rg = self.rg(x);
        self.push(vec![n, m], out, Op::TopkMask { x, kept }, rg)
    }

    /// Copies the listed rows (repeats allowed) into a new [rows.len(), m].
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (n, m) = rows_view(self.shape(x))?;
        if rows.is_empty() {
            return Err(Error::Argument("gather_rows: empty row list".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Argument(format!("gather_rows: row {bad} out of range {n}")));
        }
        let mut out = vec![0.0; rows.len() * m];
        for (dst, &src) in rows.iter().enumerate() {
            out[dst * m..(dst + 1) * m].copy_from_slice(&self.nodes[x.0].data[src * m..(src + 1) * m]);
        }
        let rg = self.rg(x);
        self.push(vec![rows.len(), m], out, Op::GatherRows { x, rows: rows.to_vec() }, rg)
    }

    /// Places row r of x at row rows[r] of an otherwise-zero [out_rows, m]
    /// output; destinations must be distinct.
    pub fn scatter_rows(&mut self, x: NodeId, rows: &[usize], out_rows: usize) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(x))?;
        if rows.len() != n {
            return Err(Error::Argument(format!(
                "scatter_rows: {} destinations for {n} rows",
                rows.len()
            )));
        }
        let mut seen = vec![false; out_rows];
        for &r in rows {
            if r >= out_rows {
                return Err(Error::Argument(format!("scatter_rows: row {r} out of range {out_rows}")));
            }
            if seen[r] {
                return Err(Error::Argument(format!("scatter_rows: duplicate destination {r}")));
            }
            seen[r] = true;
        }
        let mut out = vec![0.0; out_rows * m];
        for (src, &dst) in rows.iter().enumerate() {
            out[dst * m..(dst + 1) * m].copy_from_slice(&self.nodes[x.0].data[src * m..(src + 1) * m]);
        }
        let rg = self.rg(x);
        self.push(vec![out_rows, m], out, Op::ScatterRows { x, rows: rows.to_vec() }, rg)
    }

    /// Builds a matrix whose row r copies row srcs[r].1 of node srcs[r].0;
    /// sources may repeat and may be different nodes, as long as widths
    /// agree. Higher-rank sources are treated as stacks of their last-axis
    /// rows.
    pub fn assemble_rows(&mut self, srcs: &[(NodeId, usize)]) -> Result<NodeId> {
        if srcs.is_empty() {
            return Err(Error::Argument("assemble_rows: empty source list".into()));
        }
        let m = *self.shape(srcs[0].0).last().expect("non-empty shape");
        let mut out = vec![0.0; srcs.len() * m];
        let mut rg = false;
        for (dst, &(node, src_row)) in srcs.iter().enumerate() {
            let (rows, width) = rows_view(self.shape(node))?;
            if width != m {
                return Err(Error::Shape(format!(
                    "assemble_rows: width {width} of source {dst} differs from {m}"
                )));
            }
            if src_row >= rows {
                return Err(Error::Argument(format!(
                    "assemble_rows: row {src_row} out of range {rows}"
                )));
            }
            out[dst * m..(dst + 1) * m]
                .copy_from_slice(&self.nodes[node.0].data[src_row * m..(src_row + 1) * m]);
            rg |= self.rg(node);
        }
        self.push(vec![srcs.len(), m], out, Op::AssembleRows { srcs: srcs.to_vec() }, rg)
    }

    /// Stacks 2-d parts along rows; widths must agree.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows: empty part list".into()));
        }
        let (_, m) = as_2d(self.shape(parts[0]))?;
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (n, w) = as_2d(self.shape(p))?;
            if w != m {
                return Err(Error::Shape(format!("concat_rows: widths {m} and {w} differ")));
            }
            total += n;
            rg |= self.rg(p);
        }
        let mut out = Vec::with_capacity(total * m);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(vec![total, m], out, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(x))?;
        if start + len > m || len == 0 {
            return Err(Error::Argument(format!(
                "slice_cols: [{start}, {}) out of range for width {m}",
                start + len
            )));
        }
        let mut out = vec![0.0; n * len];
        for r in 0..n {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[x.0].data[r * m + start..r * m + start + len]);
        }
        let rg = self.rg(x);
        self.push(vec![n, len], out, Op::SliceCols { x, start, len }, rg)
    }

    /// Concatenates 2-d parts along columns; row counts must agree.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols: empty part list".into()));
        }
        let (n, _) = as_2d(self.shape(parts[0]))?;
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (rows, w) = as_2d(self.shape(p))?;
            if rows != n {
                return Err(Error::Shape(format!("concat_cols: row counts {n} and {rows} differ")));
            }
            total += w;
            rg |= self.rg(p);
        }
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for &p in parts {
            let (_, w) = as_2d(self.shape(p)).expect("validated above");
            for r in 0..n {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(vec![n, total], out, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    /// Mean over consecutive groups of `group` rows: [n,m] → [n/group, m].
    pub fn row_group_mean(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(x))?;
        if group == 0 || n % group != 0 {
            return Err(Error::Argument(format!(
                "row_group_mean: group {group} does not divide {n} rows"
            )));
        }
        let out_rows = n / group;
        let mut out = vec![0.0; out_rows * m];
        for g in 0..out_rows {
            for r in 0..group {
                let src = &self.nodes[x.0].data[(g * group + r) * m..(g * group + r + 1) * m];
                for j in 0..m {
                    out[g * m + j] += src[j];
                }
            }
            for j in 0..m {
                out[g * m + j] /= group as f64;
            }
        }
        let rg = self.rg(x);
        self.push(vec![out_rows, m], out, Op::RowGroupMean { x, group }, rg)
    }

    /// Scales row r of x by w[rows[r], col]; gradient flows into both x and
    /// the selected entries of w. Used to weight expert outputs by their
    /// surviving gate probabilities.
    pub fn scale_rows_by_col(&mut self, x: NodeId, w: NodeId, rows: &[usize], col: usize) -> Result<NodeId> {
        if x == w {
            return Err(Error::Argument("scale_rows_by_col: x and w must be distinct nodes".into()));
        }
        let (n, m) = as_2d(self.shape(x))?;
        let (wn, wm) = as_2d(self.shape(w))?;
        if rows.len() != n {
            return Err(Error::Argument(format!(
                "scale_rows_by_col: {} weight rows for {n} data rows",
                rows.len()
            )));
        }
        if col >= wm {
            return Err(Error::Argument(format!("scale_rows_by_col: column {col} out of range {wm}")));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= wn) {
            return Err(Error::Argument(format!("scale_rows_by_col: row {bad} out of range {wn}")));
        }
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let wv = self.nodes[w.0].data[rows[r] * wm + col];
            for j in 0..m {
                out[r * m + j] = self.nodes[x.0].data[r * m + j] * wv;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(vec![n, m], out, Op::ScaleRowsByCol { x, w, rows: rows.to_vec(), col }, rg)
    }

    /// Column sums: [n,m] → [m].
    pub fn col_sums(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = as_2d(self.shape(x))?;
        let mut out = vec![0.0; m];
        for r in 0..n {
            for j in 0..m {
                out[j] += self.nodes[x.0].data[r * m + j];
            }
        }
        let rg = self.rg(x);
        self.push(vec![m], out, Op::ColSums(x), rg)
    }

    /// Elementwise product with a constant mask; the mask gets no gradient.
    pub fn mul_mask(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId> {
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "mul_mask: mask length {} does not match {}",
                mask.len(),
                self.nodes[x.0].data.len()
            )));
        }
        let out: Vec<f64> =
            self.nodes[x.0].data.iter().zip(mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::MulMask { x, mask: mask.to_vec() }, rg)
    }

    /// Mean over rows of −log softmax(logits)[target]; fused for stability.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = as_2d(self.shape(logits))?;
        if targets.len() != n {
            return Err(Error::Argument(format!(
                "softmax_cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Argument(format!("target {t} out of range for {c} classes")));
            }
            let row = &self.nodes[logits.0].data[r * c..(r + 1) * c];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![total / n as f64],
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Mean over rows of −log(probs[r, target_r]), taken directly on already
    /// normalized probabilities (the router's steering loss reads the full
    /// softmax output, not fresh logits).
    pub fn nll_from_probs(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = as_2d(self.shape(probs))?;
        if targets.len() != n {
            return Err(Error::Argument(format!(
                "nll_from_probs: {} targets for {n} rows",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Argument(format!("target {t} out of range for {c} classes")));
            }
            let p = self.nodes[probs.0].data[r * c + t];
            if p <= 0.0 {
                return Err(Error::Numeric(format!(
                    "nll_from_probs: probability {p} at row {r} is not positive"
                )));
            }
            total -= p.ln();
        }
        let rg = self.rg(probs);
        self.push(vec![1], vec![total / n as f64], Op::NllFromProbs { probs, targets: targets.to_vec() }, rg)
    }

    /// Reverse sweep from a scalar loss node. Gradients of every node up to
    /// and including `loss` are (re)computed; earlier backward results on
    /// this tape are overwritten.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            // Parents always precede the node, so splitting at i gives
            // disjoint borrows: the node itself in `tail`, parents in `head`.
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = &node.grad;
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    accumulate(head, *a, g, |gv, _| gv);
                    accumulate(head, *b, g, |gv, _| gv);
                }
                Op::Sub(a, b) => {
                    accumulate(head, *a, g, |gv, _| gv);
                    accumulate(head, *b, g, |gv, _| -gv);
                }
                Op::Mul(a, b) => {
                    let (ai, bi) = (a.0, b.0);
                    if head[ai].requires_grad {
                        for i in 0..g.len() {
                            let other = head[bi].data[i];
                            head[ai].grad[i] += g[i] * other;
                        }
                    }
                    if head[bi].requires_grad {
                        for i in 0..g.len() {
                            let other = head[ai].data[i];
                            head[bi].grad[i] += g[i] * other;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (ai, bi) = (a.0, b.0);
                    if head[ai].requires_grad {
                        for i in 0..g.len() {
                            head[ai].grad[i] += g[i] / head[bi].data[i];
                        }
                    }
                    if head[bi].requires_grad {
                        for i in 0..g.len() {
                            let av = head[ai].data[i];
                            let bv = head[bi].data[i];
                            head[bi].grad[i] -= g[i] * av / (bv * bv);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(head, *a, g, |gv, _| gv * c);
                }
                Op::AddConst(a) => {
                    accumulate(head, *a, g, |gv, _| gv);
                }
                Op::AddRow { x, row } => {
                    let m = head[row.0].data.len();
                    accumulate(head, *x, g, |gv, _| gv);
                    if head[row.0].requires_grad {
                        for (i, gv) in g.iter().enumerate() {
                            head[row.0].grad[i % m] += gv;
                        }
                    }
                }
                Op::MulRow { x, row } => {
                    let (xi, ri) = (x.0, row.0);
                    let m = head[ri].data.len();
                    if head[xi].requires_grad {
                        for (i, gv) in g.iter().enumerate() {
                            head[xi].grad[i] += gv * head[ri].data[i % m];
                        }
                    }
                    if head[ri].requires_grad {
                        for (i, gv) in g.iter().enumerate() {
                            head[ri].grad[i % m] += gv * head[xi].data[i];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ai, bi) = (a.0, b.0);
                    let n = head[ai].shape[0];
                    let k = head[ai].shape[1];
                    let m = head[bi].shape[1];
                    if ai == bi {
                        // x·x with a square x: both contributions land on x.
                        if head[ai].requires_grad {
                            let data = head[ai].data.clone();
                            kernels::matmul_nt_acc(g, &data, n, m, k, &mut head[ai].grad);
                            kernels::matmul_tn_acc(&data, g, n, k, m, &mut head[ai].grad);
                        }
                    } else {
                        if head[ai].requires_grad {
                            let (pa, pb) = two_mut(head, ai, bi);
                            kernels::matmul_nt_acc(g, &pb.data, n, m, k, &mut pa.grad);
                        }
                        if head[bi].requires_grad {
                            let (pa, pb) = two_mut(head, ai, bi);
                            kernels::matmul_tn_acc(&pa.data, g, n, k, m, &mut pb.grad);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let ai = a.0;
                    if head[ai].requires_grad {
                        let n = head[ai].shape[0];
                        let m = head[ai].shape[1];
                        for r in 0..n {
                            for j in 0..m {
                                head[ai].grad[r * m + j] += g[j * n + r];
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    let ai = a.0;
                    if head[ai].requires_grad {
                        for i in 0..g.len() {
                            let x = head[ai].data[i];
                            head[ai].grad[i] += g[i] * kernels::gelu_grad(x);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let ai = a.0;
                    if head[ai].requires_grad {
                        for i in 0..g.len() {
                            let y = node.data[i];
                            head[ai].grad[i] += g[i] * (1.0 - y * y);
                        }
                    }
                }
                Op::Log(a) => {
                    let ai = a.0;
                    if head[ai].requires_grad {
                        for i in 0..g.len() {
                            head[ai].grad[i] += g[i] / head[ai].data[i];
                        }
                    }
                }
                Op::SumAll(a) => {
                    accumulate_broadcast(head, *a, g[0]);
                }
                Op::MeanAll(a) => {
                    let n = head[a.0].data.len() as f64;
                    accumulate_broadcast(head, *a, g[0] / n);
                }
                Op::NormalizeRows { x, inv_sigma } => {
                    let xi = x.0;
                    if head[xi].requires_grad {
                        let m = head[xi].shape[1];
                        for (r, &inv) in inv_sigma.iter().enumerate() {
                            let grow = &g[r * m..(r + 1) * m];
                            let yrow = &node.data[r * m..(r + 1) * m];
                            let gmean = grow.iter().sum::<f64>() / m as f64;
                            let gymean =
                                grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum::<f64>() / m as f64;
                            for j in 0..m {
                                head[xi].grad[r * m + j] +=
                                    inv * (grow[j] - gmean - yrow[j] * gymean);
                            }
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let ai = a.0;
                    if head[ai].requires_grad {
                        let m = node.shape[1];
                        for r in 0..node.shape[0] {
                            let yrow = &node.data[r * m..(r + 1) * m];
                            let grow = &g[r * m..(r + 1) * m];
                            let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                            for j in 0..m {
                                head[ai].grad[r * m + j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
                Op::TopkMask { x, kept } => {
                    let xi = x.0;
                    if head[xi].requires_grad {
                        for &idx in kept {
                            head[xi].grad[idx] += g[idx];
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    let xi = x.0;
                    if head[xi].requires_grad {
                        let m = node.shape[1];
                        for (dst, &src) in rows.iter().enumerate() {
                            for j in 0..m {
                                head[xi].grad[src * m + j] += g[dst * m + j];
                            }
                        }
                    }
                }
                Op::ScatterRows { x, rows } => {
                    let xi = x.0;
                    if head[xi].requires_grad {
                        let m = node.shape[1];
                        for (src, &dst) in rows.iter().enumerate() {
                            for j in 0..m {
                                head[xi].grad[src * m + j] += g[dst * m + j];
                            }
                        }
                    }
                }
                Op::AssembleRows { srcs } => {
                    let m = node.shape[1];
                    for (dst, &(nid, src_row)) in srcs.iter().enumerate() {
                        if head[nid.0].requires_grad {
                            for j in 0..m {
                                head[nid.0].grad[src_row * m + j] += g[dst * m + j];
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = head[p.0].data.len();
                        if head[p.0].requires_grad {
                            for i in 0..len {
                                head[p.0].grad[i] += g[offset + i];
                            }
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xi = x.0;
                    if head[xi].requires_grad {
                        let m = head[xi].shape[1];
                        for r in 0..node.shape[0] {
                            for j in 0..*len {
                                head[xi].grad[r * m + start + j] += g[r * len + j];
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let n = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = head[p.0].shape[1];
                        if head[p.0].requires_grad {
                            for r in 0..n {
                                for j in 0..w {
                                    head[p.0].grad[r * w + j] += g[r * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::RowGroupMean { x, group } => {
                    let xi = x.0;
                    if head[xi].requires_grad {
                        let m = node.shape[1];
                        let scale = 1.0 / *group as f64;
                        for gr in 0..node.shape[0] {
                            for r in 0..*group {
                                for j in 0..m {
                                    head[xi].grad[(gr * group + r) * m + j] += g[gr * m + j] * scale;
                                }
                            }
                        }
                    }
                }
                Op::ScaleRowsByCol { x, w, rows, col } => {
                    let (xi, wi) = (x.0, w.0);
                    let m = node.shape[1];
                    let wm = head[wi].shape[1];
                    if head[xi].requires_grad {
                        let (px, pw) = two_mut(head, xi, wi);
                        for (r, &wr) in rows.iter().enumerate() {
                            let wv = pw.data[wr * wm + col];
                            for j in 0..m {
                                px.grad[r * m + j] += g[r * m + j] * wv;
                            }
                        }
                    }
                    if head[wi].requires_grad {
                        let (px, pw) = two_mut(head, xi, wi);
                        for (r, &wr) in rows.iter().enumerate() {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[r * m + j] * px.data[r * m + j];
                            }
                            pw.grad[wr * wm + col] += acc;
                        }
                    }
                }
                Op::ColSums(x) => {
                    let xi = x.0;
                    if head[xi].requires_grad {
                        let n = head[xi].shape[0];
                        let m = head[xi].shape[1];
                        for r in 0..n {
                            for j in 0..m {
                                head[xi].grad[r * m + j] += g[j];
                            }
                        }
                    }
                }
                Op::MulMask { x, mask } => {
                    let xi = x.0;
                    if head[xi].requires_grad {
                        for i in 0..g.len() {
                            head[xi].grad[i] += g[i] * mask[i];
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let li = logits.0;
                    if head[li].requires_grad {
                        let n = targets.len();
                        let c = head[li].shape[1];
                        let scale = g[0] / n as f64;
                        for (r, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                let indicator = if j == t { 1.0 } else { 0.0 };
                                head[li].grad[r * c + j] += scale * (probs[r * c + j] - indicator);
                            }
                        }
                    }
                }
                Op::NllFromProbs { probs, targets } => {
                    let pi = probs.0;
                    if head[pi].requires_grad {
                        let n = targets.len();
                        let c = head[pi].shape[1];
                        let scale = g[0] / n as f64;
                        for (r, &t) in targets.iter().enumerate() {
                            let p = head[pi].data[r * c + t];
                            head[pi].grad[r * c + t] -= scale / p;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulates the gradient of every parameter-linked leaf back into the
    /// store. Multiple leases of one parameter sum, matching the tape
    /// contract of exactly-once accumulation per use.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                store.get_mut(pid).accumulate_grad(&node.grad);
            }
        }
    }
}

/// Treats any tensor as a stack of last-axis rows.
fn rows_view(shape: &[usize]) -> crate::Result<(usize, usize)> {
    match shape {
        [] => Err(Error::Shape("expected at least 1 dimension".into())),
        s => {
            let m = *s.last().expect("non-empty");
            let n: usize = s[..s.len() - 1].iter().product::<usize>().max(1);
            Ok((n, m))
        }
    }
}

fn accumulate(head: &mut [Node], target: NodeId, g: &[f64], f: impl Fn(f64, usize) -> f64) {
    let node = &mut head[target.0];
    if node.requires_grad {
        for (i, &gv) in g.iter().enumerate() {
            node.grad[i] += f(gv, i);
        }
    }
}

fn accumulate_broadcast(head: &mut [Node], target: NodeId, g: f64) {
    let node = &mut head[target.0];
    if node.requires_grad {
        for gi in node.grad.iter_mut() {
            *gi += g;
        }
    }
}

/// Disjoint mutable borrows of two distinct nodes.
fn two_mut(nodes: &mut [Node], a: usize, b: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = nodes.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
