//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Operations are recorded as they are evaluated; node ids are topologically
//! ordered by construction. [`Tape::backward`] runs one reverse sweep from a
//! scalar loss and accumulates gradients additively, so a node feeding two
//! consumers receives the sum of both path gradients.
//!
//! The op set is exactly what the recognizer needs: dense matrix products,
//! pointwise nonlinearities, layer normalization, seeded inverted dropout,
//! row gather (embedding lookup and frame decimation), concatenation, the
//! reductions, and two fused loss nodes (CTC, KL) that carry analytic
//! gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Direction of the KL unification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// KL(p1 || p2)
    Forward,
    /// KL(p2 || p1)
    Reverse,
    /// 0.5 * (KL(p1 || p2) + KL(p2 || p1))
    Symmetric,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// x: R x C plus bias: C, broadcast over rows.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Adds a non-differentiable constant (positional encoding, causal mask).
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    /// a: m x k times b-transposed with b: n x k.
    MatMulTransB(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    LogSoftmax(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    /// Output row i is input row rows[i]; backward scatter-adds.
    Gather {
        x: NodeId,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    /// Mean over the mask-true entries of a vector.
    MaskedMean {
        x: NodeId,
        mask: Vec<bool>,
    },
    /// Output i is x[i][ids[i]] for a rows x V input.
    PickPerRow {
        x: NodeId,
        ids: Vec<usize>,
    },
    /// Scalar loss with a precomputed gradient w.r.t. its input.
    FusedLoss {
        x: NodeId,
        grad: Tensor,
    },
    KlLoss {
        p1: NodeId,
        p2: NodeId,
        direction: KlDirection,
        stop_grad_p2: bool,
        mask: Vec<bool>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value, self.needs(&[a, b])))
    }

    /// x: R x C, bias: vector of length C broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (rows, cols) = vx.rows_cols();
        if vb.len() != cols {
            return Err(shape_err("add_bias", vx, vb));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(vx.data()[r * cols + c] + vb.data()[c]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias(x, bias), value, self.needs(&[x, bias])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value, self.needs(&[a, b])))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(Op::Scale(a, c), value, self.needs(&[a]))
    }

    pub fn add_const(&mut self, a: NodeId, t: &Tensor) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.shape() != t.shape() {
            return Err(shape_err("add_const", va, t));
        }
        let data = va
            .data()
            .iter()
            .zip(t.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::AddConst(a), value, self.needs(&[a])))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = va.rows_cols();
        let (k2, n) = vb.rows_cols();
        if k != k2 {
            return Err(shape_err("matmul", va, vb));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value, self.needs(&[a, b])))
    }

    /// a times b-transposed; a: m x k, b: n x k, result m x n.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = va.rows_cols();
        let (n, k2) = vb.rows_cols();
        if k != k2 {
            return Err(shape_err("matmul_tb", va, vb));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMulTransB(a, b), value, self.needs(&[a, b])))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| libm::tanh(x), |a| Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| 1.0 / (1.0 + libm::exp(-x)),
            |a| Op::Sigmoid(a),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, |a| Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| libm::exp(x), |a| Op::Exp(a))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(NodeId) -> Op,
    ) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(op(a), value, self.needs(&[a]))
    }

    /// Log-softmax over the last dimension, stabilized by max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.rows_cols();
        if cols == 0 {
            return Err(Error::Contract("log_softmax: empty last dimension"));
        }
        if !va.is_finite() {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &va.data()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::LogSoftmax(a), value, self.needs(&[a])))
    }

    /// Softmax over the last dimension. Accepts -inf entries (masking).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.rows_cols();
        if cols == 0 {
            return Err(Error::Contract("softmax: empty last dimension"));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &va.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = libm::exp(row[c] - max);
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax(a), value, self.needs(&[a])))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let (rows, cols) = vx.rows_cols();
        if vg.len() != cols {
            return Err(shape_err("layer_norm", vx, vg));
        }
        if vb.len() != cols {
            return Err(shape_err("layer_norm", vx, vb));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let (mean, inv_std) = row_norm_stats(row);
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv_std;
                data[r * cols + c] = vg.data()[c] * xhat + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(
            Op::LayerNorm { x, gain, bias },
            value,
            self.needs(&[x, gain, bias]),
        ))
    }

    /// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
    /// With `training == false` or `p == 0` the input passes through bitwise
    /// and the rng is not consumed.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        rng: &mut Rng,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter(alloc::format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let vx = &self.nodes[x.0].value;
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..vx.len())
            .map(|_| if rng.next_f64() < p { 0.0 } else { scale })
            .collect();
        let data = vx
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, value, self.needs(&[x])))
    }

    /// Selects rows of a 2-D input; serves as embedding lookup and strided
    /// frame decimation.
    pub fn gather(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let (n, cols) = vx.rows_cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidParameter(alloc::format!(
                "gather: row {bad} out of {n}"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            data.extend_from_slice(&vx.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(Op::Gather { x, rows }, value, self.needs(&[x])))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: no inputs"));
        }
        let cols = self.nodes[parts[0].0].value.rows_cols().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in &parts {
            let v = &self.nodes[p.0].value;
            let (r, c) = v.rows_cols();
            if c != cols {
                return Err(shape_err("concat_rows", &self.nodes[parts[0].0].value, v));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let needs = self.needs(&parts);
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts), value, needs))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs"));
        }
        let rows = self.nodes[parts[0].0].value.rows_cols().0;
        let mut total_cols = 0;
        for &p in &parts {
            let (r, c) = self.nodes[p.0].value.rows_cols();
            if r != rows {
                return Err(shape_err("concat_cols", &self.nodes[parts[0].0].value, &self.nodes[p.0].value));
            }
            total_cols += c;
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &p in &parts {
            let v = &self.nodes[p.0].value;
            let (_, c) = v.rows_cols();
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let needs = self.needs(&parts);
        let value = Tensor::new(vec![rows, total_cols], data)?;
        Ok(self.push(Op::ConcatCols(parts), value, needs))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let (rows, cols) = vx.rows_cols();
        if start + len > cols {
            return Err(Error::Contract("slice_cols: range out of bounds"));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(Op::SliceCols { x, start, len }, value, self.needs(&[x])))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), needs)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum();
        let m = s / v.len() as f64;
        let needs = self.needs(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(m), needs)
    }

    /// Mean over the entries of a vector whose mask is true.
    pub fn masked_mean(&mut self, x: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.len() != mask.len() {
            return Err(Error::Contract("masked_mean: mask length mismatch"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("masked_mean: mask selects no positions"));
        }
        let s: f64 = vx
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .sum();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Op::MaskedMean { x, mask },
            Tensor::scalar(s / count as f64),
            needs,
        ))
    }

    /// out[i] = x[i][ids[i]] for a rows x V input.
    pub fn pick_per_row(&mut self, x: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let (rows, cols) = vx.rows_cols();
        if ids.len() != rows {
            return Err(Error::Contract("pick_per_row: id count != rows"));
        }
        if let Some(&bad) = ids.iter().find(|&&c| c >= cols) {
            return Err(Error::InvalidParameter(alloc::format!(
                "pick_per_row: column {bad} out of {cols}"
            )));
        }
        let data: Vec<f64> = ids
            .iter()
            .enumerate()
            .map(|(r, &c)| vx.data()[r * cols + c])
            .collect();
        let value = Tensor::new(vec![rows], data)?;
        Ok(self.push(Op::PickPerRow { x, ids }, value, self.needs(&[x])))
    }

    /// Records a scalar loss whose gradient w.r.t. `x` was computed
    /// analytically by the caller (used by the CTC forward-backward).
    pub fn fused_loss(&mut self, x: NodeId, loss: f64, grad: Tensor) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.shape() != grad.shape() {
            return Err(shape_err("fused_loss", vx, &grad));
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Op::FusedLoss { x, grad }, Tensor::scalar(loss), needs))
    }

    /// KL unification loss between two log-posterior matrices, averaged over
    /// the mask-true rows.
    ///
    /// The symmetric gradient is grouped as `0.5 * (p1*(lp1-lp2) + (p1-p2))`
    /// per element, which is exactly zero when the two inputs are bitwise
    /// identical; that keeps the degenerate no-dropout case free of gradient
    /// noise.
    pub fn kl_loss(
        &mut self,
        p1: NodeId,
        p2: NodeId,
        direction: KlDirection,
        stop_grad_p2: bool,
        row_mask: &[bool],
    ) -> Result<NodeId> {
        let (v1, v2) = (&self.nodes[p1.0].value, &self.nodes[p2.0].value);
        if v1.shape() != v2.shape() {
            return Err(shape_err("kl_loss", v1, v2));
        }
        let (rows, cols) = v1.rows_cols();
        if row_mask.len() != rows {
            return Err(Error::Contract("kl_loss: row mask length mismatch"));
        }
        let count = row_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("kl_loss: mask selects no positions"));
        }
        let mut total = 0.0;
        for r in 0..rows {
            if !row_mask[r] {
                continue;
            }
            let a = &v1.data()[r * cols..(r + 1) * cols];
            let b = &v2.data()[r * cols..(r + 1) * cols];
            total += match direction {
                KlDirection::Forward => kl_row(a, b),
                KlDirection::Reverse => kl_row(b, a),
                KlDirection::Symmetric => 0.5 * (kl_row(a, b) + kl_row(b, a)),
            };
        }
        let value = Tensor::scalar(total / count as f64);
        let needs = self.needs(&[p1, p2]);
        Ok(self.push(
            Op::KlLoss {
                p1,
                p2,
                direction,
                stop_grad_p2,
                mask: row_mask.to_vec(),
            },
            value,
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss node. Every node with
    /// `requires_grad` ends up with a gradient of its own shape (zero if the
    /// loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract("backward: loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Nodes the loss never reached still get a zero gradient.
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => {
                *slot = Some(delta.clone());
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g);
                if self.nodes[bias.0].requires_grad {
                    let cols = self.nodes[bias.0].value.len();
                    let rows = g.len() / cols;
                    let mut db = Tensor::zeros(vec![cols]);
                    for r in 0..rows {
                        for c in 0..cols {
                            db.data_mut()[c] += g.data()[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let vb = &self.nodes[b.0].value;
                    let da = elementwise(g, vb, |g, v| g * v);
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let va = &self.nodes[a.0].value;
                    let db = elementwise(g, va, |g, v| g * v);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da = map_grad(g, |g| g * c);
                self.accumulate(grads, *a, &da);
            }
            Op::AddConst(a) => {
                self.accumulate(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = va.rows_cols();
                let (_, n) = vb.rows_cols();
                if self.nodes[a.0].requires_grad {
                    let mut da = Tensor::zeros(va.shape().to_vec());
                    mm_nt(g.data(), vb.data(), m, n, k, da.data_mut());
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = Tensor::zeros(vb.shape().to_vec());
                    mm_tn(va.data(), g.data(), m, k, n, db.data_mut());
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::MatMulTransB(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = va.rows_cols();
                let (n, _) = vb.rows_cols();
                if self.nodes[a.0].requires_grad {
                    // da = g (m x n) * b (n x k)
                    let mut da = Tensor::zeros(va.shape().to_vec());
                    mm_nn(g.data(), vb.data(), m, n, k, da.data_mut());
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // db = g^T (n x m) * a (m x k)
                    let mut db = Tensor::zeros(vb.shape().to_vec());
                    mm_tn(g.data(), va.data(), m, n, k, db.data_mut());
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Tanh(a) => {
                let da = elementwise(g, &node.value, |g, y| g * (1.0 - y * y));
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da = elementwise(g, &node.value, |g, y| g * y * (1.0 - y));
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let vx = &self.nodes[a.0].value;
                let da = elementwise(g, vx, |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, &da);
            }
            Op::Exp(a) => {
                let da = elementwise(g, &node.value, |g, y| g * y);
                self.accumulate(grads, *a, &da);
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = node.value.rows_cols();
                let mut da = Tensor::zeros(node.value.shape().to_vec());
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let yr = &node.value.data()[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        da.data_mut()[r * cols + c] = gr[c] - libm::exp(yr[c]) * gsum;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let (rows, cols) = node.value.rows_cols();
                let mut da = Tensor::zeros(node.value.shape().to_vec());
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let yr = &node.value.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for c in 0..cols {
                        da.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gain.0].value;
                let (rows, cols) = vx.rows_cols();
                let mut dx = Tensor::zeros(vx.shape().to_vec());
                let mut dgain = Tensor::zeros(vec![cols]);
                let mut dbias = Tensor::zeros(vec![cols]);
                for r in 0..rows {
                    let row = &vx.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let (mean, inv_std) = row_norm_stats(row);
                    // dxhat, and the two row means the backward needs
                    let mut dxhat = vec![0.0; cols];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv_std;
                        dgain.data_mut()[c] += gr[c] * xhat;
                        dbias.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * vg.data()[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat;
                    }
                    mean_dxhat /= cols as f64;
                    mean_dxhat_xhat /= cols as f64;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv_std;
                        dx.data_mut()[r * cols + c] =
                            inv_std * (dxhat[c] - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }
            Op::Dropout { x, mask } => {
                let mut da = Tensor::zeros(node.value.shape().to_vec());
                for ((d, g), m) in da.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *d = g * m;
                }
                self.accumulate(grads, *x, &da);
            }
            Op::Gather { x, rows } => {
                let vx = &self.nodes[x.0].value;
                let (_, cols) = vx.rows_cols();
                let mut dx = Tensor::zeros(vx.shape().to_vec());
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] += g.data()[i * cols + c];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ConcatRows(parts) => {
                let cols = node.value.rows_cols().1;
                let mut row = 0;
                for &p in parts {
                    let (r, _) = self.nodes[p.0].value.rows_cols();
                    if self.nodes[p.0].requires_grad {
                        let slice = &g.data()[row * cols..(row + r) * cols];
                        let dp =
                            Tensor::new(self.nodes[p.0].value.shape().to_vec(), slice.to_vec())
                                .unwrap();
                        self.accumulate(grads, p, &dp);
                    }
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total_cols) = node.value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.nodes[p.0].value.rows_cols();
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Tensor::zeros(self.nodes[p.0].value.shape().to_vec());
                        for r in 0..rows {
                            dp.data_mut()[r * c..(r + 1) * c].copy_from_slice(
                                &g.data()[r * total_cols + offset..r * total_cols + offset + c],
                            );
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let vx = &self.nodes[x.0].value;
                let (rows, cols) = vx.rows_cols();
                let mut dx = Tensor::zeros(vx.shape().to_vec());
                for r in 0..rows {
                    for c in 0..*len {
                        dx.data_mut()[r * cols + start + c] += g.data()[r * len + c];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Sum(a) => {
                let gv = g.item();
                let da = Tensor::full(self.nodes[a.0].value.shape().to_vec(), gv);
                self.accumulate(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let da = Tensor::full(self.nodes[a.0].value.shape().to_vec(), g.item() / n);
                self.accumulate(grads, *a, &da);
            }
            Op::MaskedMean { x, mask } => {
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let gv = g.item() / count;
                let mut dx = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if m {
                        *d = gv;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::PickPerRow { x, ids } => {
                let vx = &self.nodes[x.0].value;
                let (_, cols) = vx.rows_cols();
                let mut dx = Tensor::zeros(vx.shape().to_vec());
                for (r, &c) in ids.iter().enumerate() {
                    dx.data_mut()[r * cols + c] += g.data()[r];
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::FusedLoss { x, grad } => {
                let gv = g.item();
                let dx = map_grad(grad, |v| v * gv);
                self.accumulate(grads, *x, &dx);
            }
            Op::KlLoss {
                p1,
                p2,
                direction,
                stop_grad_p2,
                mask,
            } => {
                let (v1, v2) = (&self.nodes[p1.0].value, &self.nodes[p2.0].value);
                let (rows, cols) = v1.rows_cols();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g.item() / count;
                let mut d1 = Tensor::zeros(v1.shape().to_vec());
                let mut d2 = Tensor::zeros(v2.shape().to_vec());
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..cols {
                        let idx = r * cols + c;
                        let (lp1, lp2) = (v1.data()[idx], v2.data()[idx]);
                        let (q1, q2) = (libm::exp(lp1), libm::exp(lp2));
                        // Grouped so both components vanish exactly when
                        // lp1 == lp2 bitwise (symmetric direction).
                        let (g1, g2) = match direction {
                            KlDirection::Forward => (q1 * (lp1 - lp2) + q1, -q1),
                            KlDirection::Reverse => (-q2, q2 * (lp2 - lp1) + q2),
                            KlDirection::Symmetric => (
                                0.5 * (q1 * (lp1 - lp2) + (q1 - q2)),
                                0.5 * (q2 * (lp2 - lp1) + (q2 - q1)),
                            ),
                        };
                        d1.data_mut()[idx] = scale * g1;
                        d2.data_mut()[idx] = scale * g2;
                    }
                }
                self.accumulate(grads, *p1, &d1);
                if !stop_grad_p2 {
                    self.accumulate(grads, *p2, &d2);
                }
            }
        }
    }
}

fn kl_row(lp: &[f64], lq: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in lp.iter().zip(lq) {
        s += libm::exp(*a) * (a - b);
    }
    s
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn elementwise(g: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(v.data()).map(|(a, b)| f(*a, *b)).collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

fn map_grad(g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = g.data().iter().map(|&a| f(a)).collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

const LN_EPS: f64 = 1e-5;

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + LN_EPS))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|&x| libm::exp(x - max)).sum();
    max + libm::log(sum)
}

/// C += A (m x k) * B (k x n)
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A (m x k) * B^T with B (n x k)
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for l in 0..k {
                s += arow[l] * brow[l];
            }
            c[i * n + j] += s;
        }
    }
}

/// C += A^T (k x m becomes m x k input) * B; A (m x k), B (m x n), C (k x n)
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}
