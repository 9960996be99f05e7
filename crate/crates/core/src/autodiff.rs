//! Reverse-mode automatic differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation of a forward pass as a [`Node`] in
//! topological order; [`Tape::backward`] then walks the tape once in reverse
//! and accumulates gradients into the nodes that require them. Gradients are
//! available with respect to both parameters (for the optimizer) and inputs
//! (for saliency maps and adversarial attacks).
//!
//! The op set is exactly what a small CNN and a small policy network need;
//! there is no graph optimization and no higher-order differentiation.

use rayon::prelude::*;
use std::fmt;

use crate::tensor::{
    avg_pool2d_nchw, conv2d_nchw, matmul, softmax_rows, Tensor, TensorError, PAR_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq)]
pub enum AutodiffError {
    Tensor(TensorError),
    /// backward was called on a node whose value is not a single scalar.
    NonScalarLoss { len: usize },
    /// A NodeId does not belong to this tape.
    DetachedNode { index: usize, tape_len: usize },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AutodiffError::Tensor(e) => write!(f, "{e}"),
            AutodiffError::NonScalarLoss { len } => {
                write!(f, "backward requires a scalar loss, got {len} elements")
            }
            AutodiffError::DetachedNode { index, tape_len } => {
                write!(f, "node {index} is not on this tape (len {tape_len})")
            }
        }
    }
}

impl std::error::Error for AutodiffError {}

impl From<TensorError> for AutodiffError {
    fn from(e: TensorError) -> Self {
        AutodiffError::Tensor(e)
    }
}

pub type AdResult<T> = Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Training losses available to the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Multi-label binary cross-entropy on sigmoid outputs (the default).
    SigmoidBce,
    /// Soft-target cross-entropy on softmax outputs (ablation alternative).
    SoftCrossEntropy,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// y = x·Wᵀ + b with x: B×F, W: O×F, b: O.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        padding: usize,
    },
    AvgPool2d {
        input: NodeId,
        kernel: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Mean binary cross-entropy of probabilities against fixed soft targets.
    BceLoss {
        probs: NodeId,
        targets: Tensor,
    },
    /// −Σ targets·log_softmax(logits) averaged over rows.
    SoftCeLoss {
        logits: NodeId,
        targets: Tensor,
    },
    /// Σ_b coef_b · log_softmax(logits)[b, action_b] — the policy-gradient
    /// surrogate objective.
    WeightedLogProb {
        logits: NodeId,
        actions: Vec<usize>,
        coefs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Record of one forward pass.
///
/// Nodes appear strictly after their parents, so a single reverse sweep
/// performs backpropagation. A tape is single-threaded by design; run
/// concurrent passes on separate tapes.
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

    fn check(&self, id: NodeId) -> AdResult<()> {
        if id.0 >= self.nodes.len() {
            return Err(AutodiffError::DetachedNode {
                index: id.0,
                tape_len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Add an input node. Gradients are only tracked through nodes that
    /// require them, so constants cost nothing in the backward sweep.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated for `id` by the last backward pass, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Move the gradient out of the tape (leaves `None` behind).
    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    /// Clear every gradient slot so the tape can be swept again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // -- op builders --------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> AdResult<NodeId> {
        self.check(a)?;
        let value = self.nodes[a.0].value.scale(c);
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::Scale(a, c)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Fully connected layer: input B×F, weight O×F, bias O → output B×O.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> AdResult<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            }
            .into());
        }
        let (bsz, f) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        if b.len() != o {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                left: vec![o],
                right: b.shape().to_vec(),
            }
            .into());
        }
        let mut out = vec![0.0; bsz * o];
        let row_job = |(bi, row): (usize, &mut [f64])| {
            let x_row = &x.data()[bi * f..(bi + 1) * f];
            for (oi, r) in row.iter_mut().enumerate() {
                let w_row = &w.data()[oi * f..(oi + 1) * f];
                let mut acc = b.data()[oi];
                for (xv, wv) in x_row.iter().zip(w_row) {
                    acc += xv * wv;
                }
                *r = acc;
            }
        };
        if bsz * o * f >= PAR_THRESHOLD {
            out.par_chunks_mut(o).enumerate().for_each(row_job);
        } else {
            out.chunks_mut(o).enumerate().for_each(row_job);
        }
        let value = Tensor::new(vec![bsz, o], out)?;
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        padding: usize,
    ) -> AdResult<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let value = conv2d_nchw(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            Some(self.nodes[bias.0].value.data()),
            padding,
        )?;
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
        ))
    }

    pub fn avg_pool2d(&mut self, input: NodeId, kernel: usize) -> AdResult<NodeId> {
        self.check(input)?;
        let value = avg_pool2d_nchw(&self.nodes[input.0].value, kernel)?;
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::AvgPool2d { input, kernel }))
    }

    pub fn relu(&mut self, input: NodeId) -> AdResult<NodeId> {
        self.check(input)?;
        let value = self.nodes[input.0].value.map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::Relu(input)))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> AdResult<NodeId> {
        self.check(input)?;
        let value = self.nodes[input.0].value.map(stable_sigmoid);
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::Sigmoid(input)))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> AdResult<NodeId> {
        self.check(input)?;
        let value = self.nodes[input.0].value.reshape(shape)?;
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::Reshape(input)))
    }

    pub fn sum(&mut self, input: NodeId) -> AdResult<NodeId> {
        self.check(input)?;
        let value = Tensor::scalar(self.nodes[input.0].value.sum());
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::Sum(input)))
    }

    pub fn mean(&mut self, input: NodeId) -> AdResult<NodeId> {
        self.check(input)?;
        let value = Tensor::scalar(self.nodes[input.0].value.mean()?);
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::Mean(input)))
    }

    /// Mean element-wise binary cross-entropy between probabilities and soft
    /// targets. Log arguments are clamped to [1e-12, 1−1e-12] so saturated
    /// probabilities cannot produce infinite loss.
    pub fn bce_loss(&mut self, probs: NodeId, targets: Tensor) -> AdResult<NodeId> {
        self.check(probs)?;
        let p = &self.nodes[probs.0].value;
        if p.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                left: p.shape().to_vec(),
                right: targets.shape().to_vec(),
            }
            .into());
        }
        if p.is_empty() {
            return Err(TensorError::EmptyInput("bce_loss").into());
        }
        let n = p.len() as f64;
        let mut acc = 0.0;
        for (&pv, &tv) in p.data().iter().zip(targets.data()) {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        }
        let value = Tensor::scalar(acc / n);
        let rg = self.requires(probs);
        Ok(self.push(value, rg, Op::BceLoss { probs, targets }))
    }

    /// −Σ targets·log_softmax(logits), averaged over rows.
    pub fn soft_ce_loss(&mut self, logits: NodeId, targets: Tensor) -> AdResult<NodeId> {
        self.check(logits)?;
        let z = &self.nodes[logits.0].value;
        if z.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "soft_ce_loss",
                left: z.shape().to_vec(),
                right: targets.shape().to_vec(),
            }
            .into());
        }
        if z.rank() != 2 || z.is_empty() {
            return Err(TensorError::RankMismatch {
                op: "soft_ce_loss",
                expected: 2,
                got: z.rank(),
            }
            .into());
        }
        let (bsz, n) = (z.shape()[0], z.shape()[1]);
        let mut acc = 0.0;
        for bi in 0..bsz {
            let row = &z.data()[bi * n..(bi + 1) * n];
            let lse = log_sum_exp(row);
            for (k, &tv) in targets.data()[bi * n..(bi + 1) * n].iter().enumerate() {
                if tv != 0.0 {
                    acc -= tv * (row[k] - lse);
                }
            }
        }
        let value = Tensor::scalar(acc / bsz as f64);
        let rg = self.requires(logits);
        Ok(self.push(value, rg, Op::SoftCeLoss { logits, targets }))
    }

    /// Policy-gradient surrogate Σ_b coef_b·log π(action_b | row b).
    pub fn weighted_log_prob(
        &mut self,
        logits: NodeId,
        actions: Vec<usize>,
        coefs: Vec<f64>,
    ) -> AdResult<NodeId> {
        self.check(logits)?;
        let z = &self.nodes[logits.0].value;
        if z.rank() != 2 || z.shape()[0] != actions.len() || actions.len() != coefs.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_log_prob",
                left: z.shape().to_vec(),
                right: vec![actions.len(), coefs.len()],
            }
            .into());
        }
        let n = z.shape()[1];
        if let Some(&bad) = actions.iter().find(|&&a| a >= n) {
            return Err(TensorError::BadParameter {
                op: "weighted_log_prob action",
                value: bad as i64,
            }
            .into());
        }
        let mut acc = 0.0;
        for (bi, (&a, &c)) in actions.iter().zip(&coefs).enumerate() {
            let row = &z.data()[bi * n..(bi + 1) * n];
            acc += c * (row[a] - log_sum_exp(row));
        }
        let value = Tensor::scalar(acc);
        let rg = self.requires(logits);
        Ok(self.push(
            value,
            rg,
            Op::WeightedLogProb {
                logits,
                actions,
                coefs,
            },
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Backpropagate from a scalar loss node, filling the gradient slot of
    /// every reachable node that requires gradients.
    pub fn backward(&mut self, loss: NodeId) -> AdResult<()> {
        self.check(loss)?;
        let len = self.nodes[loss.0].value.len();
        if len != 1 {
            return Err(AutodiffError::NonScalarLoss { len });
        }
        if !self.nodes[loss.0].requires_grad {
            // Nothing upstream wants a gradient; the sweep would be a no-op.
            return Ok(());
        }
        self.accumulate(loss, Tensor::scalar(1.0))?;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.step_backward(idx)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) -> AdResult<()> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return Ok(());
        }
        match &mut node.grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            None => {
                if node.value.shape() != delta.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "gradient accumulate",
                        left: node.value.shape().to_vec(),
                        right: delta.shape().to_vec(),
                    }
                    .into());
                }
                node.grad = Some(delta);
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize) -> AdResult<()> {
        // Take the gradient out to avoid aliasing; put it back afterwards.
        let grad = self.nodes[idx].grad.take().expect("checked by caller");
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad.clone())?;
                self.accumulate(b, grad.clone())?;
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = grad.mul(&self.nodes[b.0].value)?;
                let db = grad.mul(&self.nodes[a.0].value)?;
                self.accumulate(a, da)?;
                self.accumulate(b, db)?;
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, grad.scale(c))?;
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // da[i,kk] = Σ_j g[i,j]·b[kk,j]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let g_row = &grad.data()[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let b_row = &bv.data()[kk * n..(kk + 1) * n];
                        da[i * k + kk] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                    }
                }
                // db[kk,j] = Σ_i a[i,kk]·g[i,j]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let g_row = &grad.data()[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let aik = av.data()[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let db_row = &mut db[kk * n..(kk + 1) * n];
                        for (d, g) in db_row.iter_mut().zip(g_row) {
                            *d += aik * g;
                        }
                    }
                }
                self.accumulate(a, Tensor::new(vec![m, k], da)?)?;
                self.accumulate(b, Tensor::new(vec![k, n], db)?)?;
            }
            Op::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let xv = &self.nodes[input.0].value;
                let wv = &self.nodes[weight.0].value;
                let (bsz, f) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                let mut dx = vec![0.0; bsz * f];
                let dx_job = |(bi, dx_row): (usize, &mut [f64])| {
                    let g_row = &grad.data()[bi * o..(bi + 1) * o];
                    for (oi, &gv) in g_row.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let w_row = &wv.data()[oi * f..(oi + 1) * f];
                        for (d, w) in dx_row.iter_mut().zip(w_row) {
                            *d += gv * w;
                        }
                    }
                };
                let mut dw = vec![0.0; o * f];
                let dw_job = |(oi, dw_row): (usize, &mut [f64])| {
                    for bi in 0..bsz {
                        let gv = grad.data()[bi * o + oi];
                        if gv == 0.0 {
                            continue;
                        }
                        let x_row = &xv.data()[bi * f..(bi + 1) * f];
                        for (d, x) in dw_row.iter_mut().zip(x_row) {
                            *d += gv * x;
                        }
                    }
                };
                if bsz * o * f >= PAR_THRESHOLD {
                    dx.par_chunks_mut(f).enumerate().for_each(dx_job);
                    dw.par_chunks_mut(f).enumerate().for_each(dw_job);
                } else {
                    dx.chunks_mut(f).enumerate().for_each(dx_job);
                    dw.chunks_mut(f).enumerate().for_each(dw_job);
                }
                let mut db = vec![0.0; o];
                for bi in 0..bsz {
                    for (d, g) in db.iter_mut().zip(&grad.data()[bi * o..(bi + 1) * o]) {
                        *d += g;
                    }
                }
                self.accumulate(input, Tensor::new(vec![bsz, f], dx)?)?;
                self.accumulate(weight, Tensor::new(vec![o, f], dw)?)?;
                self.accumulate(bias, Tensor::new(vec![o], db)?)?;
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (input, weight, bias, padding) = (*input, *weight, *bias, *padding);
                let (dx, dw, db) = conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    &grad,
                    padding,
                );
                self.accumulate(input, dx)?;
                self.accumulate(weight, dw)?;
                self.accumulate(bias, db)?;
            }
            Op::AvgPool2d { input, kernel } => {
                let (input, kernel) = (*input, *kernel);
                let in_shape = self.nodes[input.0].value.shape().to_vec();
                let (h, w) = (in_shape[2], in_shape[3]);
                let (oh, ow) = (h / kernel, w / kernel);
                let inv = 1.0 / (kernel * kernel) as f64;
                let planes = in_shape[0] * in_shape[1];
                let mut dx = vec![0.0; planes * h * w];
                let plane_job = |(pi, dx_plane): (usize, &mut [f64])| {
                    let g_plane = &grad.data()[pi * oh * ow..(pi + 1) * oh * ow];
                    for i in 0..h {
                        let gi = i / kernel;
                        for j in 0..w {
                            dx_plane[i * w + j] = g_plane[gi * ow + j / kernel] * inv;
                        }
                    }
                };
                if planes * h * w >= PAR_THRESHOLD {
                    dx.par_chunks_mut(h * w).enumerate().for_each(plane_job);
                } else {
                    dx.chunks_mut(h * w).enumerate().for_each(plane_job);
                }
                self.accumulate(input, Tensor::new(in_shape, dx)?)?;
            }
            Op::Relu(a) => {
                let a = *a;
                let data = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                let delta = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
                self.accumulate(a, delta)?;
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.nodes[idx].value;
                let data = y
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                let delta = Tensor::new(y.shape().to_vec(), data)?;
                self.accumulate(a, delta)?;
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let delta = grad.reshape(shape)?;
                self.accumulate(a, delta)?;
            }
            Op::Sum(a) => {
                let a = *a;
                let g = grad.data()[0];
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(a, Tensor::full(shape, g))?;
            }
            Op::Mean(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g = grad.data()[0] / self.nodes[a.0].value.len() as f64;
                self.accumulate(a, Tensor::full(shape, g))?;
            }
            Op::BceLoss { probs, targets } => {
                let probs = *probs;
                let p = &self.nodes[probs.0].value;
                let n = p.len() as f64;
                let g = grad.data()[0];
                let data: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&pv, &tv)| {
                        // Clamped region contributes a constant: zero slope.
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                            0.0
                        } else {
                            g * ((1.0 - tv) / (1.0 - pv) - tv / pv) / n
                        }
                    })
                    .collect();
                let delta = Tensor::new(p.shape().to_vec(), data)?;
                self.accumulate(probs, delta)?;
            }
            Op::SoftCeLoss { logits, targets } => {
                let logits = *logits;
                let z = &self.nodes[logits.0].value;
                let (bsz, n) = (z.shape()[0], z.shape()[1]);
                let probs = softmax_rows(z)?;
                let g = grad.data()[0] / bsz as f64;
                let mut data = vec![0.0; bsz * n];
                for bi in 0..bsz {
                    let t_row = &targets.data()[bi * n..(bi + 1) * n];
                    let t_sum: f64 = t_row.iter().sum();
                    let p_row = &probs.data()[bi * n..(bi + 1) * n];
                    for k in 0..n {
                        data[bi * n + k] = g * (p_row[k] * t_sum - t_row[k]);
                    }
                }
                let delta = Tensor::new(vec![bsz, n], data)?;
                self.accumulate(logits, delta)?;
            }
            Op::WeightedLogProb {
                logits,
                actions,
                coefs,
            } => {
                let logits = *logits;
                let actions = actions.clone();
                let coefs = coefs.clone();
                let z = &self.nodes[logits.0].value;
                let (bsz, n) = (z.shape()[0], z.shape()[1]);
                let probs = softmax_rows(z)?;
                let g = grad.data()[0];
                let mut data = vec![0.0; bsz * n];
                for bi in 0..bsz {
                    let c = coefs[bi] * g;
                    let p_row = &probs.data()[bi * n..(bi + 1) * n];
                    for k in 0..n {
                        let indicator = if k == actions[bi] { 1.0 } else { 0.0 };
                        data[bi * n + k] = c * (indicator - p_row[k]);
                    }
                }
                let delta = Tensor::new(vec![bsz, n], data)?;
                self.accumulate(logits, delta)?;
            }
        }
        // Leaves keep their gradient; interior nodes get theirs restored so
        // callers can inspect intermediate gradients too.
        self.nodes[idx].grad = Some(grad);
        Ok(())
    }
}

const BCE_EPS: f64 = 1e-12;

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gradients of a stride-1 zero-padded cross-correlation.
fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (oc, k) = (weight.shape()[0], weight.shape()[2]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);

    let work = b * oc * c * k * k * oh * ow;

    // d/d input: scatter each output-gradient tap back through the kernel.
    let mut dx = vec![0.0; b * c * h * w];
    let dx_job = |(bi, dx_img): (usize, &mut [f64])| {
        let g_img = &grad.data()[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
        for o in 0..oc {
            let g_plane = &g_img[o * oh * ow..(o + 1) * oh * ow];
            for ci in 0..c {
                let dx_plane = &mut dx_img[ci * h * w..(ci + 1) * h * w];
                let w_base = (o * c + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight.data()[w_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let src_i = i + ky;
                            if src_i < padding || src_i - padding >= h {
                                continue;
                            }
                            let dst_row = (src_i - padding) * w;
                            let j_lo = padding.saturating_sub(kx);
                            let j_hi = (w + padding - kx).min(ow);
                            if j_lo >= j_hi {
                                continue;
                            }
                            let dst_off = dst_row + j_lo + kx - padding;
                            let g_row = &g_plane[i * ow + j_lo..i * ow + j_hi];
                            let dst = &mut dx_plane[dst_off..dst_off + (j_hi - j_lo)];
                            for (d, g) in dst.iter_mut().zip(g_row) {
                                *d += wv * g;
                            }
                        }
                    }
                }
            }
        }
    };
    if b > 1 && work >= PAR_THRESHOLD {
        dx.par_chunks_mut(c * h * w).enumerate().for_each(dx_job);
    } else {
        dx.chunks_mut(c * h * w).enumerate().for_each(dx_job);
    }

    // d/d weight: correlation of input with the output gradient. Parallel
    // over out-channels; the batch sum inside runs in a fixed order.
    let mut dw = vec![0.0; oc * c * k * k];
    let dw_job = |(o, dw_oc): (usize, &mut [f64])| {
        for bi in 0..b {
            let g_plane = &grad.data()[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
            for ci in 0..c {
                let in_plane = &input.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let src_i = i + ky;
                            if src_i < padding || src_i - padding >= h {
                                continue;
                            }
                            let src_row = (src_i - padding) * w;
                            let j_lo = padding.saturating_sub(kx);
                            let j_hi = (w + padding - kx).min(ow);
                            if j_lo >= j_hi {
                                continue;
                            }
                            let src_off = src_row + j_lo + kx - padding;
                            let g_row = &g_plane[i * ow + j_lo..i * ow + j_hi];
                            let in_row = &in_plane[src_off..src_off + (j_hi - j_lo)];
                            acc += g_row.iter().zip(in_row).map(|(g, x)| g * x).sum::<f64>();
                        }
                        dw_oc[ci * k * k + ky * k + kx] += acc;
                    }
                }
            }
        }
    };
    if oc > 1 && work >= PAR_THRESHOLD {
        dw.par_chunks_mut(c * k * k).enumerate().for_each(dw_job);
    } else {
        dw.chunks_mut(c * k * k).enumerate().for_each(dw_job);
    }

    let mut db = vec![0.0; oc];
    for bi in 0..b {
        for o in 0..oc {
            let g_plane = &grad.data()[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
            db[o] += g_plane.iter().sum::<f64>();
        }
    }

    (
        Tensor::new(vec![b, c, h, w], dx).expect("shape by construction"),
        Tensor::new(vec![oc, c, k, k], dw).expect("shape by construction"),
        Tensor::new(vec![oc], db).expect("shape by construction"),
    )
}

/// Anything that can run a differentiable forward pass from a batch of
/// images to logits. Implemented by the CNN in `netlib` and used here to
/// express input-gradient computations without a dependency cycle.
pub trait ForwardModel {
    /// Record the forward pass on `tape`, returning the logits node.
    fn forward_tape(&self, tape: &mut Tape, input: NodeId) -> AdResult<NodeId>;
    fn num_classes(&self) -> usize;
}

/// One-hot rows for a batch of class labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * num_classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), num_classes], data).expect("shape by construction")
}

/// Attach the configured loss head to `logits` against fixed soft targets.
pub fn loss_node(
    tape: &mut Tape,
    logits: NodeId,
    targets: Tensor,
    kind: LossKind,
) -> AdResult<NodeId> {
    match kind {
        LossKind::SigmoidBce => {
            let probs = tape.sigmoid(logits)?;
            tape.bce_loss(probs, targets)
        }
        LossKind::SoftCrossEntropy => tape.soft_ce_loss(logits, targets),
    }
}

/// ∂loss/∂input for a batch, with model parameters treated as constants.
///
/// `targets` are soft label rows (one-hot for plain labels). The returned
/// tensor has the batch's shape.
pub fn grad_wrt_input_batch<M: ForwardModel>(
    model: &M,
    batch: &Tensor,
    targets: &Tensor,
    kind: LossKind,
) -> AdResult<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone(), true);
    let logits = model.forward_tape(&mut tape, x)?;
    let loss = loss_node(&mut tape, logits, targets.clone(), kind)?;
    tape.backward(loss)?;
    tape.take_grad(x)
        .ok_or(AutodiffError::DetachedNode {
            index: 0,
            tape_len: 0,
        })
}

/// ∂loss/∂x for a single C×W×W image with a hard class label.
pub fn grad_wrt_input<M: ForwardModel>(
    model: &M,
    image: &Tensor,
    label: usize,
    kind: LossKind,
) -> AdResult<Tensor> {
    if image.rank() != 3 {
        return Err(TensorError::RankMismatch {
            op: "grad_wrt_input",
            expected: 3,
            got: image.rank(),
        }
        .into());
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.reshape(shape)?;
    let targets = one_hot(&[label], model.num_classes());
    let g = grad_wrt_input_batch(model, &batch, &targets, kind)?;
    g.reshape(image.shape().to_vec()).map_err(Into::into)
}
