//! Wengert tape: operations are recorded in forward order and replayed in
//! reverse to accumulate vector-Jacobian products. One tape per training
//! step; nodes are immutable after creation except their grad buffers.

use crate::error::{contract_err, dim_err, numeric_err, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Transpose { x: TensorId, rows: usize, cols: usize },
    Add { a: TensorId, b: TensorId },
    AddRowVec { a: TensorId, v: TensorId },
    Mul { a: TensorId, b: TensorId },
    ScaleRows { a: TensorId, s: TensorId },
    Scale { x: TensorId, c: f64 },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Log { x: TensorId },
    Softmax { x: TensorId, cols: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64, cols: usize },
    Embed { table: TensorId, ids: Vec<usize> },
    ConcatRows { parts: Vec<TensorId>, rows: Vec<usize>, cols: usize },
    SliceRows { x: TensorId, start: usize, len: usize, cols: usize },
    ConcatCols { parts: Vec<TensorId>, cols: Vec<usize>, rows: usize },
    SliceCols { x: TensorId, start: usize, len: usize, in_cols: usize },
    MeanRows { x: TensorId, rows: usize, cols: usize },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, mask: Vec<bool>, cols: usize },
    SoftCrossEntropy { logits: TensorId, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording tape for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(numeric_err(format!("operation produced non-finite value {bad}")));
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { op, shape, data, requires_grad, grad: None });
        Ok(id)
    }

    /// Record a differentiable leaf (a parameter).
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            requires_grad: true,
            grad: None,
        });
        id
    }

    /// Record a non-differentiable leaf (an input or a detached constant).
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            requires_grad: false,
            grad: None,
        });
        id
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copy a node's value out as a standalone tensor.
    pub fn detach(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes hold finite data")
    }

    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(contract_err(format!("expected scalar, got shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let shape = &self.nodes[id.0].shape;
        let cols = *shape.last().unwrap_or(&0);
        let rows = if shape.len() <= 1 {
            1
        } else {
            shape[..shape.len() - 1].iter().product()
        };
        (rows, cols)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── forward operations ───────────────────────────────────────────

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 {
            return Err(dim_err("matmul requires 2-D operands"));
        }
        if k != k2 {
            return Err(dim_err(format!("matmul inner dims {k} vs {k2}")));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], data, rg)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        if self.nodes[x.0].shape.len() != 2 {
            return Err(dim_err("transpose requires a 2-D operand"));
        }
        let (rows, cols) = self.rows_cols(x);
        let data = transpose_raw(&self.nodes[x.0].data, rows, cols);
        let rg = self.needs_grad(&[x]);
        self.push(Op::Transpose { x, rows, cols }, vec![cols, rows], data, rg)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(dim_err(format!(
                "add shapes {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::Add { a, b }, shape, data, rg)
    }

    /// Broadcast-add a length-`c` vector to every row of an `r×c` tensor.
    pub fn add_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(a);
        let (vr, vc) = self.rows_cols(v);
        if vr != 1 || vc != cols {
            return Err(dim_err(format!("row-vector broadcast: {cols} columns vs vector of {vc}")));
        }
        let vdata = &self.nodes[v.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] += vdata[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, v]);
        self.push(Op::AddRowVec { a, v }, shape, data, rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(dim_err(format!(
                "mul shapes {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::Mul { a, b }, shape, data, rg)
    }

    /// Scale row `i` of `a[r×c]` by `s[i]`.
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(a);
        if self.nodes[s.0].data.len() != rows {
            return Err(dim_err(format!(
                "scale_rows: {rows} rows vs {} scales",
                self.nodes[s.0].data.len()
            )));
        }
        let sdata = &self.nodes[s.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] *= sdata[i];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, s]);
        self.push(Op::ScaleRows { a, s }, shape, data, rg)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(numeric_err(format!("scale factor {c} is not finite")));
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Scale { x, c }, shape, data, rg)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Relu { x }, shape, data, rg)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Sigmoid { x }, shape, data, rg)
    }

    /// Natural log; defined for strictly positive inputs.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if self.nodes[x.0].data.iter().any(|&v| v <= 0.0) {
            return Err(numeric_err("log of non-positive value"));
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Log { x }, shape, data, rg)
    }

    /// Row-wise softmax over the trailing axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(x);
        if cols == 0 {
            return Err(dim_err("softmax over empty axis"));
        }
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            softmax_row(
                &self.nodes[x.0].data[i * cols..(i + 1) * cols],
                &mut data[i * cols..(i + 1) * cols],
            );
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Softmax { x, cols }, shape, data, rg)
    }

    /// Affine layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(contract_err("layer_norm eps must be positive"));
        }
        let (rows, cols) = self.rows_cols(x);
        if cols == 0 {
            return Err(dim_err("layer_norm over empty axis"));
        }
        if self.nodes[gain.0].data.len() != cols || self.nodes[bias.0].data.len() != cols {
            return Err(dim_err("layer_norm gain/bias must match trailing axis"));
        }
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &self.nodes[x.0].data[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                let xhat = (row[j] - mean) * inv;
                data[i * cols + j] = self.nodes[gain.0].data[j] * xhat + self.nodes[bias.0].data[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x, gain, bias]);
        self.push(Op::LayerNorm { x, gain, bias, eps, cols }, shape, data, rg)
    }

    /// Gather rows of `table[V×d]` by token id.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, dim) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(contract_err(format!("token id {bad} out of vocabulary {vocab}")));
        }
        let mut data = vec![0.0; ids.len() * dim];
        for (row, &id) in ids.iter().enumerate() {
            data[row * dim..(row + 1) * dim]
                .copy_from_slice(&self.nodes[table.0].data[id * dim..(id + 1) * dim]);
        }
        let rg = self.needs_grad(&[table]);
        self.push(Op::Embed { table, ids: ids.to_vec() }, vec![ids.len(), dim], data, rg)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(contract_err("concat_rows of zero tensors"));
        }
        let (_, cols) = self.rows_cols(parts[0]);
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(dim_err(format!("concat_rows: column mismatch {c} vs {cols}")));
            }
            rows.push(r);
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let total: usize = rows.iter().sum();
        let rg = self.needs_grad(parts);
        self.push(Op::ConcatRows { parts: parts.to_vec(), rows, cols }, vec![total, cols], data, rg)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(x);
        if start + len > rows {
            return Err(dim_err(format!("slice_rows {start}..{} of {rows} rows", start + len)));
        }
        let data = self.nodes[x.0].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Op::SliceRows { x, start, len, cols }, vec![len, cols], data, rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(contract_err("concat_cols of zero tensors"));
        }
        let (rows, _) = self.rows_cols(parts[0]);
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(dim_err(format!("concat_cols: row mismatch {r} vs {rows}")));
            }
            cols.push(c);
        }
        let total: usize = cols.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &c) in parts.iter().zip(&cols) {
            for i in 0..rows {
                data[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let rg = self.needs_grad(parts);
        self.push(Op::ConcatCols { parts: parts.to_vec(), cols, rows }, vec![rows, total], data, rg)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, in_cols) = self.rows_cols(x);
        if start + len > in_cols {
            return Err(dim_err(format!("slice_cols {start}..{} of {in_cols} columns", start + len)));
        }
        let mut data = vec![0.0; rows * len];
        for i in 0..rows {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[x.0].data[i * in_cols + start..i * in_cols + start + len]);
        }
        let rg = self.needs_grad(&[x]);
        self.push(Op::SliceCols { x, start, len, in_cols }, vec![rows, len], data, rg)
    }

    /// Mean over axis 0: `[r×c] -> [1×c]`.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(x);
        if rows == 0 {
            return Err(dim_err("mean over zero rows"));
        }
        let mut data = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j] += self.nodes[x.0].data[i * cols + j];
            }
        }
        for v in data.iter_mut() {
            *v /= rows as f64;
        }
        let rg = self.needs_grad(&[x]);
        self.push(Op::MeanRows { x, rows, cols }, vec![1, cols], data, rg)
    }

    /// Mean cross-entropy between rows of `logits` and hard targets, skipping
    /// rows where `mask` is false. Fused log-softmax keeps it stable.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize], mask: &[bool]) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(logits);
        if targets.len() != rows || mask.len() != rows {
            return Err(dim_err(format!(
                "cross_entropy: {rows} rows vs {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(contract_err(format!("target {bad} out of range {cols}")));
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(contract_err("cross_entropy with all rows masked out"));
        }
        let mut total = 0.0;
        let mut scratch = vec![0.0; cols];
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            log_softmax_row(&self.nodes[logits.0].data[i * cols..(i + 1) * cols], &mut scratch);
            total -= scratch[targets[i]];
        }
        let value = total / active as f64;
        let rg = self.needs_grad(&[logits]);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), cols },
            vec![1],
            vec![value],
            rg,
        )
    }

    /// `-Σ_c target[c]·log_softmax(logits)[c]` for a single row of logits.
    pub fn soft_cross_entropy(&mut self, logits: TensorId, target: &[f64]) -> Result<TensorId> {
        let n = self.nodes[logits.0].data.len();
        if target.len() != n {
            return Err(dim_err(format!("soft_cross_entropy: {n} logits vs {} targets", target.len())));
        }
        let mut lsm = vec![0.0; n];
        log_softmax_row(&self.nodes[logits.0].data, &mut lsm);
        let value = -target.iter().zip(&lsm).map(|(p, l)| p * l).sum::<f64>();
        let rg = self.needs_grad(&[logits]);
        self.push(Op::SoftCrossEntropy { logits, target: target.to_vec() }, vec![1], vec![value], rg)
    }

    // ── backward pass ────────────────────────────────────────────────

    /// Seed the scalar `loss` with 1 and accumulate gradients into every
    /// reachable grad-requiring node.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(contract_err(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.clone().expect("checked above");
            self.backward_op(i, &op, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[id.0].grad = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let bt = transpose_raw(&self.nodes[b.0].data, *k, *n);
                let da = matmul_raw(grad, &bt, *m, *n, *k);
                self.accumulate(*a, &da);
                let at = transpose_raw(&self.nodes[a.0].data, *m, *k);
                let db = matmul_raw(&at, grad, *k, *m, *n);
                self.accumulate(*b, &db);
            }
            Op::Transpose { x, rows, cols } => {
                let dx = transpose_raw(grad, *cols, *rows);
                self.accumulate(*x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::AddRowVec { a, v } => {
                self.accumulate(*a, grad);
                let (rows, cols) = self.rows_cols(*a);
                let mut dv = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dv[j] += grad[i * cols + j];
                    }
                }
                self.accumulate(*v, &dv);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = grad.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = grad.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::ScaleRows { a, s } => {
                let (rows, cols) = self.rows_cols(*a);
                let mut da = vec![0.0; rows * cols];
                let mut ds = vec![0.0; rows];
                for i in 0..rows {
                    let sv = self.nodes[s.0].data[i];
                    for j in 0..cols {
                        da[i * cols + j] = grad[i * cols + j] * sv;
                        ds[i] += grad[i * cols + j] * self.nodes[a.0].data[i * cols + j];
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*s, &ds);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[out_idx].data)
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> = grad.iter().zip(&self.nodes[x.0].data).map(|(g, v)| g / v).collect();
                self.accumulate(*x, &dx);
            }
            Op::Softmax { x, cols } => {
                let rows = grad.len() / cols;
                let mut dx = vec![0.0; grad.len()];
                for i in 0..rows {
                    let y = &self.nodes[out_idx].data[i * cols..(i + 1) * cols];
                    let g = &grad[i * cols..(i + 1) * cols];
                    let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..*cols {
                        dx[i * cols + j] = y[j] * (g[j] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps, cols } => {
                let rows = grad.len() / cols;
                let mut dx = vec![0.0; grad.len()];
                let mut dgain = vec![0.0; *cols];
                let mut dbias = vec![0.0; *cols];
                for i in 0..rows {
                    let row = &self.nodes[x.0].data[i * cols..(i + 1) * cols];
                    let g = &grad[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f64>() / *cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / *cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let w: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[gain.0].data)
                        .map(|(gi, ga)| gi * ga)
                        .collect();
                    let mean_w = w.iter().sum::<f64>() / *cols as f64;
                    let mean_wx = w.iter().zip(&xhat).map(|(wi, xi)| wi * xi).sum::<f64>() / *cols as f64;
                    for j in 0..*cols {
                        dx[i * cols + j] = (w[j] - mean_w - xhat[j] * mean_wx) * inv;
                        dgain[j] += g[j] * xhat[j];
                        dbias[j] += g[j];
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::Embed { table, ids } => {
                let (_, dim) = self.rows_cols(*table);
                let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        dt[id * dim + j] += grad[row * dim + j];
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::ConcatRows { parts, rows, cols } => {
                let mut offset = 0;
                for (&p, &r) in parts.iter().zip(rows) {
                    self.accumulate(p, &grad[offset..offset + r * cols]);
                    offset += r * cols;
                }
            }
            Op::SliceRows { x, start, len, cols } => {
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                dx[start * cols..(start + len) * cols].copy_from_slice(grad);
                self.accumulate(*x, &dx);
            }
            Op::ConcatCols { parts, cols, rows } => {
                let total: usize = cols.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(cols) {
                    let mut dp = vec![0.0; rows * c];
                    for i in 0..*rows {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&grad[i * total + offset..i * total + offset + c]);
                    }
                    self.accumulate(p, &dp);
                    offset += c;
                }
            }
            Op::SliceCols { x, start, len, in_cols } => {
                let rows = grad.len() / len;
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for i in 0..rows {
                    dx[i * in_cols + start..i * in_cols + start + len]
                        .copy_from_slice(&grad[i * len..(i + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Op::MeanRows { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        dx[i * cols + j] = grad[j] / *rows as f64;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::CrossEntropy { logits, targets, mask, cols } => {
                let rows = targets.len();
                let active = mask.iter().filter(|&&m| m).count() as f64;
                let gscale = grad[0] / active;
                let mut dl = vec![0.0; rows * cols];
                let mut prob = vec![0.0; *cols];
                for i in 0..rows {
                    if !mask[i] {
                        continue;
                    }
                    softmax_row(&self.nodes[logits.0].data[i * cols..(i + 1) * cols], &mut prob);
                    for j in 0..*cols {
                        dl[i * cols + j] = gscale * (prob[j] - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(*logits, &dl);
            }
            Op::SoftCrossEntropy { logits, target } => {
                let n = target.len();
                let mut prob = vec![0.0; n];
                softmax_row(&self.nodes[logits.0].data, &mut prob);
                let psum: f64 = target.iter().sum();
                let dl: Vec<f64> = prob
                    .iter()
                    .zip(target)
                    .map(|(q, p)| grad[0] * (q * psum - p))
                    .collect();
                self.accumulate(*logits, &dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(vec![2, 1], vec![1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]));
        let eye = tape.constant(&t(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(vec![2, 3], vec![0.0; 6]));
        let b = tape.constant(&t(vec![2, 2], vec![0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![2], vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let z = tape.constant(&Tensor::zeros(vec![32]));
        let yz = tape.softmax(z).unwrap();
        for &v in tape.value(yz) {
            assert!((v - 0.03125).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_no_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![2], vec![1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1] >= 0.0 && v[1] < 1e-12);
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![0]));
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn layer_norm_zero_and_constant_input() {
        let mut tape = Tape::new();
        let gain = tape.constant(&t(vec![4], vec![1.0; 4]));
        let bias = tape.constant(&Tensor::zeros(vec![4]));

        let zeros = tape.constant(&Tensor::zeros(vec![4]));
        let y = tape.layer_norm(zeros, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);

        let ones = tape.constant(&t(vec![4], vec![1.0; 4]));
        let y2 = tape.layer_norm(ones, gain, bias, 1e-5).unwrap();
        for &v in tape.value(y2) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn backward_square_and_bilinear() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![3.0]));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let y = tape.constant(&t(vec![1, 3], vec![4.0, 5.0, 6.0]));
        let prod = tape.mul(x, y).unwrap();
        let ones = tape.constant(&t(vec![3, 1], vec![1.0; 3]));
        let total = tape.matmul(prod, ones).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(vec![3, 10]));
        let loss = tape
            .cross_entropy(logits, &[1, 5, 9], &[true, true, true])
            .unwrap();
        let v = tape.scalar_value(loss).unwrap();
        assert!((v - 10.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_mask_ignores_rows() {
        let mut tape = Tape::new();
        let logits = tape.constant(&t(
            vec![3, 2],
            vec![5.0, -5.0, 0.0, 0.0, -7.0, 7.0],
        ));
        let full = tape.cross_entropy(logits, &[0, 0, 0], &[true, false, false]).unwrap();
        let only_first = tape.cross_entropy(logits, &[0, 1, 1], &[true, false, false]).unwrap();
        assert_eq!(
            tape.scalar_value(full).unwrap(),
            tape.scalar_value(only_first).unwrap()
        );
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![2], vec![1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(&t(vec![2, 2], vec![0.3, -0.7, 1.9, 0.01]));
            let w = tape.constant(&t(vec![2, 2], vec![0.5, 0.25, -0.125, 2.0]));
            let h = tape.matmul(x, w).unwrap();
            let s = tape.softmax(h).unwrap();
            tape.value(s).to_vec()
        };
        assert_eq!(run(), run());
    }
}
