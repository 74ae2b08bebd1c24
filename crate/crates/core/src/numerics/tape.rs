//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! `Tape` owns an arena of node buffers; each recorded op stores the ids
//! of its inputs and shape metadata, in topological order by
//! construction. `backward` walks the ops once in reverse, accumulating
//! vector-Jacobian products into every node that leads back to a
//! parameter leaf. Grad buffers of interior nodes are dropped as soon as
//! they are consumed; leaf gradients survive for the optimizer.
//!
//! Single-threaded by contract: one tape per minibatch, rebuilt each step.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::{Shape, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// a[m x k] * b[k x n]
    Matmul { a: usize, b: usize },
    /// a[m x k] * b[n x k]^T
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    /// Broadcast a 1 x C row over every row of a.
    AddRow { a: usize, row: usize },
    Scale { a: usize, k: f64 },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    SoftmaxRows { a: usize },
    /// Row-wise layer norm with learnable gain/bias.
    LayerNormRows { a: usize, gamma: usize, beta: usize },
    /// Column means: R x C -> 1 x C.
    MeanRows { a: usize },
    SumAll { a: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    /// Arbitrary row selection (rows may repeat); backward scatter-adds.
    GatherRows { a: usize, rows: Vec<usize> },
    /// (1/R) * sum_r ||row_r||^2  -> scalar.
    MeanRowSumSq { a: usize },
    /// -(1/R) * sum_r log(max(p[r, label_r], clamp)) -> scalar.
    NllMeanRows { probs: usize, labels: Vec<usize>, clamp: f64 },
}

struct Node {
    values: Vec<f64>,
    shape: Shape,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    /// Extra forward-pass state some backward rules need (layer norm).
    saved: Vec<f64>,
    op: Op,
}

/// Wengert tape: arena of buffers plus the recorded op per buffer.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, values: Vec<f64>, shape: Shape, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(values.len(), shape.len());
        self.nodes.push(Node {
            values,
            shape,
            grad: None,
            needs_grad,
            saved: Vec::new(),
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Register a non-differentiable input.
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<TensorId> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "input of {} values for shape {}x{}",
                values.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(values, Shape::new(rows, cols), false, Op::Leaf))
    }

    /// Register a parameter leaf; its gradient survives `backward`.
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        self.push(t.values().to_vec(), t.shape(), true, Op::Leaf)
    }

    /// Register a leaf with explicit grad tracking (for gradient tests on raw inputs).
    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool) -> Result<TensorId> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "leaf of {} values for shape {}x{}",
                values.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(values, Shape::new(rows, cols), needs_grad, Op::Leaf))
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].shape.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient of a leaf after `backward` (interior grads are dropped).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copy a node out as a plain tensor.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::from_vec(n.shape.rows, n.shape.cols, n.values.clone()).expect("node shape")
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(Error::shape(format!("matmul {sa} * {sb}")));
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            &mut out,
            m,
            k,
            n,
        );
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Shape::new(m, n), needs, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// a * b^T, with b stored row-major as [n x k].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.cols {
            return Err(Error::shape(format!("matmul_nt {sa} * {sb}^T")));
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.rows);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            &mut out,
            m,
            k,
            n,
        );
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Shape::new(m, n), needs, Op::MatmulNt { a: a.0, b: b.0 }))
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{name} {sa} vs {sb}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let s = self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, s, needs, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let s = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, s, needs, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let s = self.binary_same_shape(a, b, "mul_elem")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, s, needs, Op::MulElem { a: a.0, b: b.0 }))
    }

    /// Add a 1 x C bias row to every row of a.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.rows != 1 || sr.cols != sa.cols {
            return Err(Error::shape(format!("add_row {sa} + {sr}")));
        }
        let cols = sa.cols;
        let rowv = &self.nodes[row.0].values;
        let mut out = Vec::with_capacity(sa.len());
        for r in 0..sa.rows {
            let arow = &self.nodes[a.0].values[r * cols..(r + 1) * cols];
            out.extend(arow.iter().zip(rowv).map(|(x, y)| x + y));
        }
        let needs = self.needs(&[a.0, row.0]);
        Ok(self.push(out, sa, needs, Op::AddRow { a: a.0, row: row.0 }))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let s = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * k).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(out, s, needs, Op::Scale { a: a.0, k })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| x.max(0.0)).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(out, s, needs, Op::Relu { a: a.0 })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(out, s, needs, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(out, s, needs, Op::Sigmoid { a: a.0 })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let mut out = vec![0.0; s.len()];
        for r in 0..s.rows {
            let lo = r * s.cols;
            let hi = lo + s.cols;
            kernels::softmax_row(&self.nodes[a.0].values[lo..hi], &mut out[lo..hi]);
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(out, s, needs, Op::SoftmaxRows { a: a.0 })
    }

    pub fn layer_norm_rows(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let s = self.shape(a);
        let (sg, sb) = (self.shape(gamma), self.shape(beta));
        if sg.rows != 1 || sg.cols != s.cols || sb.rows != 1 || sb.cols != s.cols {
            return Err(Error::shape(format!("layer_norm {s} gamma {sg} beta {sb}")));
        }
        let c = s.cols;
        let mut out = vec![0.0; s.len()];
        // saved: xhat (rows*cols) then invstd (rows)
        let mut saved = vec![0.0; s.len() + s.rows];
        for r in 0..s.rows {
            let x = &self.nodes[a.0].values[r * c..(r + 1) * c];
            let mu = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let invstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            saved[s.len() + r] = invstd;
            let g = &self.nodes[gamma.0].values;
            let b = &self.nodes[beta.0].values;
            for j in 0..c {
                let xh = (x[j] - mu) * invstd;
                saved[r * c + j] = xh;
                out[r * c + j] = g[j] * xh + b[j];
            }
        }
        let needs = self.needs(&[a.0, gamma.0, beta.0]);
        let id = self.push(
            out,
            s,
            needs,
            Op::LayerNormRows {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
            },
        );
        self.nodes[id.0].saved = saved;
        Ok(id)
    }

    /// Column means: R x C -> 1 x C.
    pub fn mean_rows(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let mut out = vec![0.0; s.cols];
        for r in 0..s.rows {
            kernels::axpy(
                1.0 / s.rows as f64,
                &self.nodes[a.0].values[r * s.cols..(r + 1) * s.cols],
                &mut out,
            );
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(out, Shape::vector(s.cols), needs, Op::MeanRows { a: a.0 })
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        let needs = self.nodes[a.0].needs_grad;
        self.push(vec![total], Shape::scalar(), needs, Op::SumAll { a: a.0 })
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of zero parts".to_string()));
        }
        let cols = self.shape(parts[0]).cols;
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.cols != cols {
                return Err(Error::shape(format!("concat_rows col mismatch {sp}")));
            }
            rows += sp.rows;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(out, Shape::new(rows, cols), needs, Op::ConcatRows { parts: idx }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero parts".to_string()));
        }
        let rows = self.shape(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.rows != rows {
                return Err(Error::shape(format!("concat_cols row mismatch {sp}")));
            }
            cols += sp.cols;
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let pc = self.shape(p).cols;
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&self.nodes[p.0].values[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(out, Shape::new(rows, cols), needs, Op::ConcatCols { parts: idx }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if start + len > s.rows {
            return Err(Error::shape(format!(
                "slice_rows [{start}, {}) of {s}",
                start + len
            )));
        }
        let out = self.nodes[a.0].values[start * s.cols..(start + len) * s.cols].to_vec();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(
            out,
            Shape::new(len, s.cols),
            needs,
            Op::SliceRows { a: a.0, start },
        ))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if start + len > s.cols {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {}) of {s}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(s.rows * len);
        for r in 0..s.rows {
            out.extend_from_slice(&self.nodes[a.0].values[r * s.cols + start..r * s.cols + start + len]);
        }
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(
            out,
            Shape::new(s.rows, len),
            needs,
            Op::SliceCols { a: a.0, start },
        ))
    }

    /// Select rows by index, in order; indices may repeat.
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let s = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= s.rows) {
            return Err(Error::shape(format!("gather_rows index {bad} of {s}")));
        }
        let mut out = Vec::with_capacity(rows.len() * s.cols);
        for &r in rows {
            out.extend_from_slice(&self.nodes[a.0].values[r * s.cols..(r + 1) * s.cols]);
        }
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(
            out,
            Shape::new(rows.len(), s.cols),
            needs,
            Op::GatherRows {
                a: a.0,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean over rows of the squared row norm: (1/R) sum_r ||row_r||^2.
    pub fn mean_row_sum_sq(&mut self, a: TensorId) -> TensorId {
        let s = self.shape(a);
        let total: f64 = self.nodes[a.0].values.iter().map(|v| v * v).sum();
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            vec![total / s.rows as f64],
            Shape::scalar(),
            needs,
            Op::MeanRowSumSq { a: a.0 },
        )
    }

    /// Mean negative log-likelihood over rows of a probability matrix.
    ///
    /// Probabilities are clamped below at `clamp` before the log.
    pub fn nll_mean_rows(
        &mut self,
        probs: TensorId,
        labels: &[usize],
        clamp: f64,
    ) -> Result<TensorId> {
        let s = self.shape(probs);
        if labels.len() != s.rows {
            return Err(Error::shape(format!(
                "nll labels {} for {} rows",
                labels.len(),
                s.rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s.cols) {
            return Err(Error::shape(format!("nll label {bad} out of {} classes", s.cols)));
        }
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let p = self.nodes[probs.0].values[r * s.cols + l].max(clamp);
            total -= p.ln();
        }
        let needs = self.nodes[probs.0].needs_grad;
        Ok(self.push(
            vec![total / s.rows as f64],
            Shape::scalar(),
            needs,
            Op::NllMeanRows {
                probs: probs.0,
                labels: labels.to_vec(),
                clamp,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate `contrib` into the grad buffer of node `id` (if it needs one).
    fn acc(&mut self, id: usize, contrib: &[f64]) {
        let node = &mut self.nodes[id];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => kernels::axpy(1.0, contrib, g),
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Run a closure against a node's grad buffer, creating it zeroed on demand.
    fn with_grad(&mut self, id: usize, f: impl FnOnce(&Tape, &mut [f64])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let mut g = self.nodes[id]
            .grad
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[id].values.len()]);
        f(self, &mut g);
        self.nodes[id].grad = Some(g);
    }

    /// Backpropagate from a scalar loss node. Every `param`/grad-tracked
    /// leaf ends up holding d(loss)/d(leaf); interior grads are freed.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.shape(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {} node",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &gout);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: usize, op: &Op, gout: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
                let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                // dA += G * B^T
                self.with_grad(a, |t, ga| {
                    kernels::matmul_nt_acc(gout, &t.nodes[b].values, ga, m, n, k);
                });
                // dB += A^T * G
                self.with_grad(b, |t, gb| {
                    kernels::matmul_tn_acc(&t.nodes[a].values, gout, gb, m, k, n);
                });
            }
            Op::MatmulNt { a, b } => {
                let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
                let (m, k, n) = (sa.rows, sa.cols, sb.rows);
                // out = A * B^T; dA += G * B, dB += G^T * A
                self.with_grad(a, |t, ga| {
                    kernels::matmul_acc(gout, &t.nodes[b].values, ga, m, n, k);
                });
                self.with_grad(b, |t, gb| {
                    kernels::matmul_tn_acc(gout, &t.nodes[a].values, gb, m, n, k);
                });
            }
            Op::Add { a, b } => {
                self.acc(a, gout);
                self.acc(b, gout);
            }
            Op::Sub { a, b } => {
                self.acc(a, gout);
                self.with_grad(b, |_, gb| kernels::axpy(-1.0, gout, gb));
            }
            Op::MulElem { a, b } => {
                self.with_grad(a, |t, ga| {
                    for ((g, &go), &bv) in ga.iter_mut().zip(gout).zip(&t.nodes[b].values) {
                        *g += go * bv;
                    }
                });
                self.with_grad(b, |t, gb| {
                    for ((g, &go), &av) in gb.iter_mut().zip(gout).zip(&t.nodes[a].values) {
                        *g += go * av;
                    }
                });
            }
            Op::AddRow { a, row } => {
                self.acc(a, gout);
                let cols = self.nodes[row].shape.cols;
                self.with_grad(row, |_, gr| {
                    for chunk in gout.chunks_exact(cols) {
                        kernels::axpy(1.0, chunk, gr);
                    }
                });
            }
            Op::Scale { a, k } => {
                self.with_grad(a, |_, ga| kernels::axpy(k, gout, ga));
            }
            Op::Relu { a } => {
                self.with_grad(a, |t, ga| {
                    for ((g, &go), &y) in ga.iter_mut().zip(gout).zip(&t.nodes[out].values) {
                        if y > 0.0 {
                            *g += go;
                        }
                    }
                });
            }
            Op::Tanh { a } => {
                self.with_grad(a, |t, ga| {
                    for ((g, &go), &y) in ga.iter_mut().zip(gout).zip(&t.nodes[out].values) {
                        *g += go * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid { a } => {
                self.with_grad(a, |t, ga| {
                    for ((g, &go), &y) in ga.iter_mut().zip(gout).zip(&t.nodes[out].values) {
                        *g += go * y * (1.0 - y);
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let s = self.nodes[out].shape;
                self.with_grad(a, |t, ga| {
                    let y = &t.nodes[out].values;
                    for r in 0..s.rows {
                        let lo = r * s.cols;
                        let hi = lo + s.cols;
                        let dotv: f64 = gout[lo..hi]
                            .iter()
                            .zip(&y[lo..hi])
                            .map(|(g, yv)| g * yv)
                            .sum();
                        for j in lo..hi {
                            ga[j] += y[j] * (gout[j] - dotv);
                        }
                    }
                });
            }
            Op::LayerNormRows { a, gamma, beta } => {
                let s = self.nodes[out].shape;
                let c = s.cols;
                let n = s.len();
                self.with_grad(gamma, |t, gg| {
                    let xhat = &t.nodes[out].saved[..n];
                    for r in 0..s.rows {
                        for j in 0..c {
                            gg[j] += gout[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.with_grad(beta, |_, gb| {
                    for chunk in gout.chunks_exact(c) {
                        kernels::axpy(1.0, chunk, gb);
                    }
                });
                self.with_grad(a, |t, ga| {
                    let saved = &t.nodes[out].saved;
                    let xhat = &saved[..n];
                    let g = &t.nodes[gamma].values;
                    for r in 0..s.rows {
                        let invstd = saved[n + r];
                        let lo = r * c;
                        let mut mean_gx = 0.0;
                        let mut mean_gxx = 0.0;
                        for j in 0..c {
                            let gx = gout[lo + j] * g[j];
                            mean_gx += gx;
                            mean_gxx += gx * xhat[lo + j];
                        }
                        mean_gx /= c as f64;
                        mean_gxx /= c as f64;
                        for j in 0..c {
                            let gx = gout[lo + j] * g[j];
                            ga[lo + j] += invstd * (gx - mean_gx - xhat[lo + j] * mean_gxx);
                        }
                    }
                });
            }
            Op::MeanRows { a } => {
                let s = self.nodes[a].shape;
                self.with_grad(a, |_, ga| {
                    let w = 1.0 / s.rows as f64;
                    for chunk in ga.chunks_exact_mut(s.cols) {
                        kernels::axpy(w, gout, chunk);
                    }
                });
            }
            Op::SumAll { a } => {
                let g = gout[0];
                self.with_grad(a, |_, ga| {
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::ConcatRows { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].shape.len();
                    let chunk = &gout[offset..offset + len];
                    self.acc(p, chunk);
                    offset += len;
                }
            }
            Op::ConcatCols { ref parts } => {
                let rows = self.nodes[out].shape.rows;
                let cols = self.nodes[out].shape.cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].shape.cols;
                    self.with_grad(p, |_, gp| {
                        for r in 0..rows {
                            kernels::axpy(
                                1.0,
                                &gout[r * cols + offset..r * cols + offset + pc],
                                &mut gp[r * pc..(r + 1) * pc],
                            );
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceRows { a, start } => {
                let cols = self.nodes[a].shape.cols;
                self.with_grad(a, |_, ga| {
                    kernels::axpy(1.0, gout, &mut ga[start * cols..start * cols + gout.len()]);
                });
            }
            Op::SliceCols { a, start } => {
                let sa = self.nodes[a].shape;
                let len = self.nodes[out].shape.cols;
                self.with_grad(a, |_, ga| {
                    for r in 0..sa.rows {
                        kernels::axpy(
                            1.0,
                            &gout[r * len..(r + 1) * len],
                            &mut ga[r * sa.cols + start..r * sa.cols + start + len],
                        );
                    }
                });
            }
            Op::GatherRows { a, ref rows } => {
                let cols = self.nodes[a].shape.cols;
                self.with_grad(a, |_, ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        kernels::axpy(
                            1.0,
                            &gout[i * cols..(i + 1) * cols],
                            &mut ga[r * cols..(r + 1) * cols],
                        );
                    }
                });
            }
            Op::MeanRowSumSq { a } => {
                let s = self.nodes[a].shape;
                let w = 2.0 * gout[0] / s.rows as f64;
                self.with_grad(a, |t, ga| {
                    kernels::axpy(w, &t.nodes[a].values, ga);
                });
            }
            Op::NllMeanRows {
                probs,
                ref labels,
                clamp,
            } => {
                let s = self.nodes[probs].shape;
                let w = gout[0] / s.rows as f64;
                self.with_grad(probs, |t, gp| {
                    for (r, &l) in labels.iter().enumerate() {
                        let p = t.nodes[probs].values[r * s.cols + l];
                        if p >= clamp {
                            gp[r * s.cols + l] -= w / p;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.input(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.input(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let mut tape = Tape::new();
        let a = tape.input(1, 2, vec![1.0, 2.0]).unwrap();
        let b = tape.input(2, 1, vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.input(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.input(2, 3, vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("shape"));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 5, vec![1.0, -2.0, 3.0, 0.5, 9.0], true).unwrap();
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn backward_of_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 1, vec![3.0], true).unwrap();
        let y = tape.mul_elem(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 3, vec![1.0, 2.0, 3.0], true).unwrap();
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.input(1, 4, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(x);
        assert_eq!(tape.values(y), &[0.25, 0.25, 0.25, 0.25]);

        let x1 = tape.input(2, 3, vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap();
        let shifted: Vec<f64> = tape.values(x1).iter().map(|v| v + 10.0).collect();
        let x2 = tape.input(2, 3, shifted).unwrap();
        let y1 = tape.softmax_rows(x1);
        let y2 = tape.softmax_rows(x2);
        for (a, b) in tape.values(y1).iter().zip(tape.values(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
        for r in 0..2 {
            let sum: f64 = tape.values(y1)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_log_ratios() {
        let mut tape = Tape::new();
        let x = tape
            .input(1, 3, vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()])
            .unwrap();
        let y = tape.softmax_rows(x);
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in tape.values(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let b = tape.leaf(2, 1, vec![5.0, 6.0], true).unwrap();
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.values(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice_cols(cat, 2, 1).unwrap();
        assert_eq!(tape.values(back), &[5.0, 6.0]);
        let loss = tape.sum_all(back);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
        // the loss never reads a's columns, so its grad is structurally zero
        assert_eq!(tape.grad(a).unwrap(), &[0.0; 4]);
    }

    /// Central finite differences over every leaf coordinate of a graph,
    /// compared against the tape's reverse-mode gradients.
    fn fd_check(
        shapes: &[(usize, usize)],
        seed: u64,
        build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
    ) {
        use crate::numerics::rng::Rng;
        let mut rng = Rng::new(seed);
        let mut inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&(r, c)| (0..r * c).map(|_| rng.range(0.15, 1.5) * if rng.chance(0.5) { 1.0 } else { -1.0 }).collect())
            .collect();

        let eval = |inputs: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = inputs
                .iter()
                .zip(shapes)
                .map(|(v, &(r, c))| tape.leaf(r, c, v.clone(), true).unwrap())
                .collect();
            let loss = build(&mut tape, &ids);
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(shapes)
            .map(|(v, &(r, c))| tape.leaf(r, c, v.clone(), true).unwrap())
            .collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
            .collect();

        let h = 1e-5;
        for (i, shape) in shapes.iter().enumerate() {
            for j in 0..shape.0 * shape.1 {
                let orig = inputs[i][j];
                inputs[i][j] = orig + h;
                let up = eval(&inputs);
                inputs[i][j] = orig - h;
                let down = eval(&inputs);
                inputs[i][j] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = if grads[i].is_empty() { 0.0 } else { grads[i][j] };
                let denom = fd.abs().max(ad.abs()).max(1e-4);
                assert!(
                    (fd - ad).abs() / denom < 1e-4,
                    "input {i} coord {j}: fd {fd} vs ad {ad}"
                );
            }
        }
    }

    #[test]
    fn finite_differences_over_every_primitive() {
        for seed in 0..5u64 {
            // matmul -> add_row -> relu -> softmax -> nll
            fd_check(&[(3, 4), (4, 5), (1, 5)], seed, |t, ids| {
                let h = t.matmul(ids[0], ids[1]).unwrap();
                let h = t.add_row(h, ids[2]).unwrap();
                let h = t.relu(h);
                let p = t.softmax_rows(h);
                t.nll_mean_rows(p, &[0, 2, 4], 1e-12).unwrap()
            });
            // matmul_nt, tanh, sigmoid, mul_elem, scale, sum_all
            fd_check(&[(2, 4), (3, 4), (2, 3)], seed, |t, ids| {
                let s = t.matmul_nt(ids[0], ids[1]).unwrap();
                let a = t.tanh(s);
                let b = t.sigmoid(ids[2]);
                let m = t.mul_elem(a, b).unwrap();
                let m = t.scale(m, 0.7);
                t.sum_all(m)
            });
            // layer norm + mean_rows + mean_row_sum_sq + sub/add
            fd_check(&[(3, 6), (1, 6), (1, 6), (3, 6)], seed, |t, ids| {
                let y = t.layer_norm_rows(ids[0], ids[1], ids[2]).unwrap();
                let d = t.sub(y, ids[3]).unwrap();
                let l1 = t.mean_row_sum_sq(d);
                let pooled = t.mean_rows(y);
                let l2 = t.mean_row_sum_sq(pooled);
                t.add(l1, l2).unwrap()
            });
            // concat/slice/gather plumbing
            fd_check(&[(2, 3), (2, 2), (1, 5)], seed, |t, ids| {
                let cat = t.concat_cols(&[ids[0], ids[1]]).unwrap();
                let rows = t.concat_rows(&[cat, ids[2]]).unwrap();
                let picked = t.gather_rows(rows, &[2, 0, 0, 1]).unwrap();
                let sl = t.slice_rows(picked, 1, 2).unwrap();
                let sc = t.slice_cols(sl, 1, 3).unwrap();
                t.mean_row_sum_sq(sc)
            });
        }
    }

    #[test]
    fn nll_uniform_probs() {
        let m = 32;
        let mut tape = Tape::new();
        let probs = tape.input(2, m, vec![1.0 / m as f64; 2 * m]).unwrap();
        let loss = tape.nll_mean_rows(probs, &[3, 7], 1e-12).unwrap();
        assert!((tape.scalar_value(loss) - (m as f64).ln()).abs() < 1e-12);
    }
}
