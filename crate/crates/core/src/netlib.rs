//! Model definitions, the SGD optimizer, and learning-rate schedules.
//!
//! Models are flat layer lists — enough to express the small CNNs the
//! harness trains. A forward pass can run in two modes: a plain tensor pass
//! for inference, or a recorded pass on a [`Tape`] when gradients are needed.

use std::fmt;

use crate::autodiff::{AdResult, AutodiffError, ForwardModel, NodeId, Tape};
use crate::rng::Rng;
use crate::tensor::{avg_pool2d_nchw, conv2d_nchw, matmul, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub enum NetError {
    Tensor(TensorError),
    Autodiff(String),
    /// lr_at was queried outside [0, total_steps].
    ScheduleRange { step: usize, total: usize },
    /// Schedule parameters that cannot produce positive learning rates.
    BadSchedule(String),
    /// The gradient list does not line up with the parameter list.
    GradientMismatch { expected: usize, got: usize },
    /// Checkpoint parameters do not fit this model.
    ParamShape { index: usize },
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::Tensor(e) => write!(f, "{e}"),
            NetError::Autodiff(e) => write!(f, "{e}"),
            NetError::ScheduleRange { step, total } => {
                write!(f, "schedule step {step} outside 0..={total}")
            }
            NetError::BadSchedule(msg) => write!(f, "bad schedule: {msg}"),
            NetError::GradientMismatch { expected, got } => {
                write!(f, "expected {expected} gradients, got {got}")
            }
            NetError::ParamShape { index } => {
                write!(f, "parameter {index} has a mismatched shape")
            }
        }
    }
}

impl std::error::Error for NetError {}

impl From<TensorError> for NetError {
    fn from(e: TensorError) -> Self {
        NetError::Tensor(e)
    }
}

impl From<AutodiffError> for NetError {
    fn from(e: AutodiffError) -> Self {
        NetError::Autodiff(e.to_string())
    }
}

pub type NetResult<T> = Result<T, NetError>;

/// One layer of a sequential model.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d {
        weight: Tensor, // OC×IC×K×K
        bias: Tensor,   // OC
        padding: usize,
    },
    Relu,
    AvgPool { kernel: usize },
    Flatten,
    Dense {
        weight: Tensor, // O×F
        bias: Tensor,   // O
    },
}

/// Sequential model: B×C×W×W in, B×N logits out.
#[derive(Clone, Debug)]
pub struct Model {
    layers: Vec<Layer>,
    num_classes: usize,
}

impl Model {
    pub fn new(layers: Vec<Layer>, num_classes: usize) -> Self {
        Model { layers, num_classes }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Parameter tensors in a fixed traversal order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Replace every parameter with `params` (shape-checked, same order as
    /// [`Model::parameters`]).
    pub fn load_parameters(&mut self, params: &[Tensor]) -> NetResult<()> {
        let mut slots = self.parameters_mut();
        if slots.len() != params.len() {
            return Err(NetError::GradientMismatch {
                expected: slots.len(),
                got: params.len(),
            });
        }
        for (i, (slot, new)) in slots.iter_mut().zip(params).enumerate() {
            if slot.shape() != new.shape() {
                return Err(NetError::ParamShape { index: i });
            }
            **slot = new.clone();
        }
        Ok(())
    }

    /// Plain inference pass: deterministic, no gradient bookkeeping.
    pub fn forward(&self, batch: &Tensor) -> NetResult<Tensor> {
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d {
                    weight,
                    bias,
                    padding,
                } => conv2d_nchw(&x, weight, Some(bias.data()), *padding)?,
                Layer::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
                Layer::AvgPool { kernel } => avg_pool2d_nchw(&x, *kernel)?,
                Layer::Flatten => {
                    let b = x.shape()[0];
                    let f: usize = x.shape()[1..].iter().product();
                    x.reshape(vec![b, f])?
                }
                Layer::Dense { weight, bias } => {
                    // x·Wᵀ + b via matmul against the transposed weight
                    let (o, fdim) = (weight.shape()[0], weight.shape()[1]);
                    let mut wt = vec![0.0; fdim * o];
                    for oi in 0..o {
                        for fi in 0..fdim {
                            wt[fi * o + oi] = weight.data()[oi * fdim + fi];
                        }
                    }
                    let wt = Tensor::new(vec![fdim, o], wt)?;
                    let mut y = matmul(&x, &wt)?;
                    let rows = y.shape()[0];
                    for r in 0..rows {
                        for (c, b) in bias.data().iter().enumerate() {
                            y.data_mut()[r * o + c] += b;
                        }
                    }
                    y
                }
            };
        }
        Ok(x)
    }

    /// Record a forward pass for training: parameters become gradient-tracked
    /// leaves, returned in [`Model::parameters`] order.
    pub fn forward_train(&self, tape: &mut Tape, input: NodeId) -> AdResult<(NodeId, Vec<NodeId>)> {
        self.forward_on(tape, input, true)
    }

    fn forward_on(
        &self,
        tape: &mut Tape,
        input: NodeId,
        track_params: bool,
    ) -> AdResult<(NodeId, Vec<NodeId>)> {
        let mut param_nodes = Vec::new();
        let mut x = input;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d {
                    weight,
                    bias,
                    padding,
                } => {
                    let w = tape.leaf(weight.clone(), track_params);
                    let b = tape.leaf(bias.clone(), track_params);
                    param_nodes.push(w);
                    param_nodes.push(b);
                    tape.conv2d(x, w, b, *padding)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::AvgPool { kernel } => tape.avg_pool2d(x, *kernel)?,
                Layer::Flatten => {
                    let shape = tape.value(x).shape();
                    let b = shape[0];
                    let f: usize = shape[1..].iter().product();
                    tape.reshape(x, vec![b, f])?
                }
                Layer::Dense { weight, bias } => {
                    let w = tape.leaf(weight.clone(), track_params);
                    let b = tape.leaf(bias.clone(), track_params);
                    param_nodes.push(w);
                    param_nodes.push(b);
                    tape.linear(x, w, b)?
                }
            };
        }
        Ok((x, param_nodes))
    }
}

impl ForwardModel for Model {
    fn forward_tape(&self, tape: &mut Tape, input: NodeId) -> AdResult<NodeId> {
        // Parameters enter as constants: gradients flow to the input only.
        self.forward_on(tape, input, false).map(|(logits, _)| logits)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Shape of the desk-scale CNN: conv blocks (3×3 conv, relu, 2×2 avg pool)
/// followed by a two-layer classifier head.
#[derive(Clone, Debug)]
pub struct SmallCnnConfig {
    pub in_channels: usize,
    pub image_side: usize,
    pub num_classes: usize,
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        SmallCnnConfig {
            in_channels: 3,
            image_side: 32,
            num_classes: 10,
            conv_channels: vec![8, 16],
            hidden: 64,
        }
    }
}

/// Build a seeded SmallCNN. He-uniform weight init, zero biases.
pub fn small_cnn(cfg: &SmallCnnConfig, rng: &mut Rng) -> NetResult<Model> {
    if cfg.conv_channels.is_empty() {
        return Err(NetError::BadSchedule("at least one conv block".into()));
    }
    let blocks = cfg.conv_channels.len();
    if cfg.image_side % (1 << blocks) != 0 {
        return Err(NetError::Tensor(TensorError::NotDivisible {
            op: "small_cnn image side",
            extent: cfg.image_side,
            divisor: 1 << blocks,
        }));
    }
    let mut layers = Vec::new();
    let mut in_ch = cfg.in_channels;
    for &out_ch in &cfg.conv_channels {
        let fan_in = in_ch * 9;
        let limit = (6.0 / fan_in as f64).sqrt();
        layers.push(Layer::Conv2d {
            weight: Tensor::rand_uniform(vec![out_ch, in_ch, 3, 3], -limit, limit, rng),
            bias: Tensor::zeros(vec![out_ch]),
            padding: 1,
        });
        layers.push(Layer::Relu);
        layers.push(Layer::AvgPool { kernel: 2 });
        in_ch = out_ch;
    }
    layers.push(Layer::Flatten);
    let side = cfg.image_side >> blocks;
    let flat = in_ch * side * side;
    let limit = (6.0 / flat as f64).sqrt();
    layers.push(Layer::Dense {
        weight: Tensor::rand_uniform(vec![cfg.hidden, flat], -limit, limit, rng),
        bias: Tensor::zeros(vec![cfg.hidden]),
    });
    layers.push(Layer::Relu);
    let limit = (6.0 / cfg.hidden as f64).sqrt();
    layers.push(Layer::Dense {
        weight: Tensor::rand_uniform(vec![cfg.num_classes, cfg.hidden], -limit, limit, rng),
        bias: Tensor::zeros(vec![cfg.num_classes]),
    });
    Ok(Model::new(layers, cfg.num_classes))
}

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

/// Interpolation used by the one-cycle ramp and anneal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnealStrategy {
    Cosine,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// Ramp `initial → max` over the first `pct_up` of the steps, then anneal
    /// `max → final_lr` over the remainder. The three anchor values are hit
    /// exactly at step 0, the ramp end, and the final step.
    OneCycle {
        initial: f64,
        max: f64,
        final_lr: f64,
        pct_up: f64,
        total_steps: usize,
        strategy: AnnealStrategy,
    },
    /// Piecewise-constant decay: lr = base·gamma^(#milestones ≤ step).
    MultiStep {
        base: f64,
        gamma: f64,
        milestones: Vec<usize>,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn one_cycle(initial: f64, max: f64, final_lr: f64, pct_up: f64, total_steps: usize) -> NetResult<Self> {
        let sched = LrSchedule::OneCycle {
            initial,
            max,
            final_lr,
            pct_up,
            total_steps,
            strategy: AnnealStrategy::Cosine,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> NetResult<()> {
        match self {
            LrSchedule::OneCycle {
                initial,
                max,
                final_lr,
                pct_up,
                total_steps,
                ..
            } => {
                if !(*initial > 0.0 && *max > 0.0 && *final_lr > 0.0) {
                    return Err(NetError::BadSchedule("learning rates must be positive".into()));
                }
                if !(*pct_up > 0.0 && *pct_up < 1.0) {
                    return Err(NetError::BadSchedule("pct_up must lie in (0, 1)".into()));
                }
                let up = ((*total_steps as f64) * pct_up).round() as usize;
                if up == 0 || up >= *total_steps {
                    return Err(NetError::BadSchedule(format!(
                        "total steps {total_steps} too small for pct_up {pct_up}"
                    )));
                }
            }
            LrSchedule::MultiStep { base, gamma, .. } => {
                if !(*base > 0.0 && *gamma > 0.0) {
                    return Err(NetError::BadSchedule("base lr and gamma must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        match self {
            LrSchedule::OneCycle { total_steps, .. } => *total_steps,
            LrSchedule::MultiStep { total_steps, .. } => *total_steps,
        }
    }

    /// Learning rate at `step` ∈ [0, total_steps].
    pub fn lr_at(&self, step: usize) -> NetResult<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(NetError::ScheduleRange { step, total });
        }
        Ok(match self {
            LrSchedule::OneCycle {
                initial,
                max,
                final_lr,
                pct_up,
                total_steps,
                strategy,
            } => {
                let up = ((*total_steps as f64) * pct_up).round() as usize;
                if step <= up {
                    let t = step as f64 / up as f64;
                    anneal(*initial, *max, t, *strategy)
                } else {
                    let t = (step - up) as f64 / (total_steps - up) as f64;
                    anneal(*max, *final_lr, t, *strategy)
                }
            }
            LrSchedule::MultiStep {
                base,
                gamma,
                milestones,
                ..
            } => {
                let decays = milestones.iter().filter(|&&m| m <= step).count();
                base * gamma.powi(decays as i32)
            }
        })
    }
}

fn anneal(from: f64, to: f64, t: f64, strategy: AnnealStrategy) -> f64 {
    // Anchor values are part of the schedule contract: hit them exactly.
    if t == 0.0 {
        return from;
    }
    if t == 1.0 {
        return to;
    }
    match strategy {
        AnnealStrategy::Cosine => to + (from - to) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0,
        AnnealStrategy::Linear => from + (to - from) * t,
    }
}

// ---------------------------------------------------------------------------
// SGD with Nesterov momentum
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
        }
    }
}

/// Optimizer state: one velocity tensor per parameter.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig, params: &[&Tensor]) -> Self {
        let velocity = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        SgdState { config, velocity }
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn load_velocities(&mut self, velocities: Vec<Tensor>) -> NetResult<()> {
        if velocities.len() != self.velocity.len() {
            return Err(NetError::GradientMismatch {
                expected: self.velocity.len(),
                got: velocities.len(),
            });
        }
        for (i, (slot, new)) in self.velocity.iter().zip(&velocities).enumerate() {
            if slot.shape() != new.shape() {
                return Err(NetError::ParamShape { index: i });
            }
        }
        self.velocity = velocities;
        Ok(())
    }

    /// One update: weight decay is added to the gradient (classic L2 form),
    /// then the Nesterov momentum step is applied in place.
    ///
    ///   v ← μ·v + g,   θ ← θ − lr·(g + μ·v)      (nesterov)
    ///   v ← μ·v + g,   θ ← θ − lr·v              (plain momentum)
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr: f64,
    ) -> NetResult<()> {
        if grads.len() != params.len() || grads.len() != self.velocity.len() {
            return Err(NetError::GradientMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if param.shape() != grad.shape() {
                return Err(NetError::GradientMismatch {
                    expected: param.len(),
                    got: grad.len(),
                });
            }
            let p = param.data_mut();
            let v = vel.data_mut();
            let g = grad.data();
            for i in 0..p.len() {
                let gi = g[i] + wd * p[i];
                if mu != 0.0 {
                    v[i] = mu * v[i] + gi;
                    let d = if self.config.nesterov { gi + mu * v[i] } else { v[i] };
                    p[i] -= lr * d;
                } else {
                    p[i] -= lr * gi;
                }
            }
        }
        Ok(())
    }
}
