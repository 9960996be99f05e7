//! Policy-gradient controller that picks the split percentile per image.
//!
//! The controller observes the flattened saliency grid of an image together
//! with the classifier's logits, and samples one of K candidate percentiles.
//! After each classifier epoch (one episode), the policy takes a
//! REINFORCE-with-baseline ascent step on the accumulated transitions; the
//! reward of a transition is the cosine similarity between the saliency maps
//! of the clean and the mixed input.

use std::fmt;
use std::io::{self, Write};

use crate::autodiff::{AdResult, AutodiffError, ForwardModel, LossKind, NodeId, Tape};
use crate::mixers::q_grid;
use crate::rng::Rng;
use crate::saliency::{saliency_maps_batch, SaliencyGrid};
use crate::tensor::{cosine_similarity, softmax_rows, Tensor, TensorError};

#[derive(Debug)]
pub enum RlError {
    Tensor(TensorError),
    Autodiff(AutodiffError),
    /// Observation width does not match the policy input.
    ObservationDim { expected: usize, got: usize },
    EmptyTransitions,
}

impl fmt::Display for RlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RlError::Tensor(e) => write!(f, "{e}"),
            RlError::Autodiff(e) => write!(f, "{e}"),
            RlError::ObservationDim { expected, got } => {
                write!(f, "observation dim {got}, policy expects {expected}")
            }
            RlError::EmptyTransitions => write!(f, "policy update over zero transitions"),
        }
    }
}

impl std::error::Error for RlError {}

impl From<TensorError> for RlError {
    fn from(e: TensorError) -> Self {
        RlError::Tensor(e)
    }
}
impl From<AutodiffError> for RlError {
    fn from(e: AutodiffError) -> Self {
        RlError::Autodiff(e)
    }
}

pub type RlResult<T> = Result<T, RlError>;

/// Small policy network: optional rectified hidden layer, then K action
/// logits.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    hidden: Option<(Tensor, Tensor)>,
    out_weight: Tensor,
    out_bias: Tensor,
    obs_dim: usize,
    k: usize,
}

impl PolicyNet {
    pub fn new(obs_dim: usize, hidden: Option<usize>, k: usize, rng: &mut Rng) -> Self {
        let hidden_params = hidden.map(|h| {
            let limit = (6.0 / obs_dim as f64).sqrt();
            (
                Tensor::rand_uniform(vec![h, obs_dim], -limit, limit, rng),
                Tensor::zeros(vec![h]),
            )
        });
        let in2 = hidden.unwrap_or(obs_dim);
        let limit = (6.0 / in2 as f64).sqrt();
        PolicyNet {
            hidden: hidden_params,
            out_weight: Tensor::rand_uniform(vec![k, in2], -limit, limit, rng),
            out_bias: Tensor::zeros(vec![k]),
            obs_dim,
            k,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn num_actions(&self) -> usize {
        self.k
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.hidden {
            out.push(w);
            out.push(b);
        }
        out.push(&self.out_weight);
        out.push(&self.out_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some((w, b)) = &mut self.hidden {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.out_weight);
        out.push(&mut self.out_bias);
        out
    }

    pub fn load_parameters(&mut self, params: &[Tensor]) -> RlResult<()> {
        let mut slots = self.parameters_mut();
        if slots.len() != params.len() {
            return Err(RlError::ObservationDim {
                expected: slots.len(),
                got: params.len(),
            });
        }
        for (slot, new) in slots.iter_mut().zip(params) {
            if slot.shape() != new.shape() {
                return Err(RlError::Tensor(TensorError::ShapeMismatch {
                    op: "policy load",
                    left: slot.shape().to_vec(),
                    right: new.shape().to_vec(),
                }));
            }
            **slot = new.clone();
        }
        Ok(())
    }

    fn check_obs(&self, observations: &Tensor) -> RlResult<()> {
        if observations.rank() != 2 || observations.shape()[1] != self.obs_dim {
            return Err(RlError::ObservationDim {
                expected: self.obs_dim,
                got: observations.shape().get(1).copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Action logits for a batch of observations, recorded on a tape with the
    /// parameters as gradient-tracked leaves (returned in parameter order).
    pub fn logits_tape(
        &self,
        tape: &mut Tape,
        observations: NodeId,
    ) -> AdResult<(NodeId, Vec<NodeId>)> {
        let mut params = Vec::new();
        let mut x = observations;
        if let Some((w, b)) = &self.hidden {
            let wn = tape.leaf(w.clone(), true);
            let bn = tape.leaf(b.clone(), true);
            params.push(wn);
            params.push(bn);
            x = tape.linear(x, wn, bn)?;
            x = tape.relu(x)?;
        }
        let wn = tape.leaf(self.out_weight.clone(), true);
        let bn = tape.leaf(self.out_bias.clone(), true);
        params.push(wn);
        params.push(bn);
        let logits = tape.linear(x, wn, bn)?;
        Ok((logits, params))
    }

    /// Plain logits pass (no gradient bookkeeping).
    pub fn logits(&self, observations: &Tensor) -> RlResult<Tensor> {
        self.check_obs(observations)?;
        let mut tape = Tape::new();
        let obs = tape.leaf(observations.clone(), false);
        let mut x = obs;
        if let Some((w, b)) = &self.hidden {
            let wn = tape.constant(w.clone());
            let bn = tape.constant(b.clone());
            x = tape.linear(x, wn, bn)?;
            x = tape.relu(x)?;
        }
        let wn = tape.constant(self.out_weight.clone());
        let bn = tape.constant(self.out_bias.clone());
        let logits = tape.linear(x, wn, bn)?;
        Ok(tape.value(logits).clone())
    }
}

/// Controller state: the policy network, its learning rate, and the running
/// reward baseline (exponential moving average, decay 0.99).
#[derive(Clone, Debug)]
pub struct PolicyState {
    pub net: PolicyNet,
    pub learning_rate: f64,
    pub baseline: f64,
    pub baseline_decay: f64,
}

impl PolicyState {
    pub fn new(net: PolicyNet, learning_rate: f64) -> Self {
        PolicyState {
            net,
            learning_rate,
            baseline: 0.0,
            baseline_decay: 0.99,
        }
    }
}

/// One controller decision and its outcome.
#[derive(Clone, Debug)]
pub struct Transition {
    pub observation: Tensor,
    pub action: usize,
    pub reward: f64,
}

/// Observation rows: flattened saliency grid of each image concatenated with
/// its logits row.
pub fn build_observations(grids: &[SaliencyGrid], logits: &Tensor) -> RlResult<Tensor> {
    if logits.rank() != 2 || logits.shape()[0] != grids.len() {
        return Err(RlError::Tensor(TensorError::ShapeMismatch {
            op: "build_observations",
            left: vec![grids.len()],
            right: logits.shape().to_vec(),
        }));
    }
    let n = logits.shape()[1];
    let g = grids.first().map(|g| g.grid.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(grids.len() * (g + n));
    for (i, grid) in grids.iter().enumerate() {
        if grid.grid.len() != g {
            return Err(RlError::ObservationDim {
                expected: g,
                got: grid.grid.len(),
            });
        }
        data.extend_from_slice(grid.grid.data());
        data.extend_from_slice(&logits.data()[i * n..(i + 1) * n]);
    }
    Ok(Tensor::new(vec![grids.len(), g + n], data)?)
}

/// Sample one action per observation from the softmax policy. Returns
/// (action index, percentile value) pairs; the percentile grid is the same
/// K-point space the mixing policies use.
pub fn select_actions(
    policy: &PolicyState,
    observations: &Tensor,
    rng: &mut Rng,
) -> RlResult<Vec<(usize, f64)>> {
    let logits = policy.net.logits(observations)?;
    let probs = softmax_rows(&logits)?;
    let k = policy.net.num_actions();
    let qs = q_grid(k);
    let mut out = Vec::with_capacity(observations.shape()[0]);
    for row in probs.data().chunks_exact(k) {
        let u = rng.uniform();
        let mut cdf = 0.0;
        let mut action = k - 1;
        for (a, &p) in row.iter().enumerate() {
            cdf += p;
            if u < cdf {
                action = a;
                break;
            }
        }
        out.push((action, qs[action]));
    }
    Ok(out)
}

/// REINFORCE-with-baseline update: one gradient-ascent step on
/// Σ (reward − baseline)·log π(action | observation), then an EMA update of
/// the baseline. Transitions with reward equal to the baseline contribute
/// nothing, so a perfectly-centered episode leaves the policy unchanged.
pub fn policy_update(policy: &mut PolicyState, transitions: &[Transition]) -> RlResult<()> {
    if transitions.is_empty() {
        return Err(RlError::EmptyTransitions);
    }
    let obs_dim = policy.net.obs_dim();
    let mut obs_data = Vec::with_capacity(transitions.len() * obs_dim);
    for t in transitions {
        if t.observation.len() != obs_dim {
            return Err(RlError::ObservationDim {
                expected: obs_dim,
                got: t.observation.len(),
            });
        }
        obs_data.extend_from_slice(t.observation.data());
    }
    let observations = Tensor::new(vec![transitions.len(), obs_dim], obs_data)?;
    let actions: Vec<usize> = transitions.iter().map(|t| t.action).collect();
    let coefs: Vec<f64> = transitions
        .iter()
        .map(|t| t.reward - policy.baseline)
        .collect();

    let mut tape = Tape::new();
    let obs = tape.leaf(observations, false);
    let (logits, param_nodes) = policy.net.logits_tape(&mut tape, obs)?;
    let objective = tape.weighted_log_prob(logits, actions, coefs)?;
    tape.backward(objective)?;

    let grads: Vec<Tensor> = param_nodes
        .iter()
        .map(|&id| tape.take_grad(id).expect("params require grad"))
        .collect();
    let lr = policy.learning_rate;
    for (param, grad) in policy.net.parameters_mut().into_iter().zip(&grads) {
        for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p += lr * g;
        }
    }

    let mean_reward: f64 =
        transitions.iter().map(|t| t.reward).sum::<f64>() / transitions.len() as f64;
    policy.baseline =
        policy.baseline_decay * policy.baseline + (1.0 - policy.baseline_decay) * mean_reward;
    Ok(())
}

/// Controller reward: cosine similarity between the saliency maps of the
/// clean input and the mixed input, both taken against the clean label.
/// Bounded in [−1, 1]; degenerate zero-norm maps score 0.
pub fn reward<M: ForwardModel>(
    model: &M,
    x: &Tensor,
    x_mixed: &Tensor,
    label: usize,
    loss: LossKind,
) -> RlResult<f64> {
    let rewards = rewards_batch(
        model,
        &add_batch_dim(x)?,
        &add_batch_dim(x_mixed)?,
        &[label],
        loss,
    )?;
    Ok(rewards[0])
}

/// Rewards for a whole batch with two saliency passes.
pub fn rewards_batch<M: ForwardModel>(
    model: &M,
    clean: &Tensor,
    mixed: &Tensor,
    labels: &[usize],
    loss: LossKind,
) -> RlResult<Vec<f64>> {
    if clean.shape() != mixed.shape() {
        return Err(RlError::Tensor(TensorError::ShapeMismatch {
            op: "rewards_batch",
            left: clean.shape().to_vec(),
            right: mixed.shape().to_vec(),
        }));
    }
    let maps_clean = saliency_maps_batch(model, clean, labels, loss)?;
    let maps_mixed = saliency_maps_batch(model, mixed, labels, loss)?;
    maps_clean
        .iter()
        .zip(&maps_mixed)
        .map(|(a, b)| cosine_similarity(a, b).map_err(RlError::from))
        .collect()
}

fn add_batch_dim(t: &Tensor) -> RlResult<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.reshape(shape)?)
}

/// Transition log: one CSV row per decision.
pub fn dump_transitions_csv<W: Write>(
    transitions: &[Transition],
    epoch: usize,
    out: &mut W,
) -> io::Result<()> {
    for t in transitions {
        writeln!(out, "{epoch},{},{:.9}", t.action, t.reward)?;
    }
    Ok(())
}
