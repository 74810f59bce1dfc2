//! Flat-parameter MLP policies with a diagonal-Gaussian action head.
//!
//! Parameters live in one flat vector so that evolution strategies can perturb
//! them directly. The layout is layer-major; within a layer the weight matrix
//! comes first, row-major with shape `(fan_out, fan_in)`, followed by the
//! `fan_out` biases:
//!
//! ```text
//! [ W0[0][0..in] .. W0[out-1][0..in] | b0[0..out] | W1 ... | b1 ... | ... ]
//! ```
//!
//! Hidden layers use `tanh`; the output layer is linear.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::envs::Env;
use crate::error::{contract, Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(contract(format!(
                "all layer widths must be >= 1, got {} -> {:?} -> {}",
                self.input_dim, self.hidden_dims, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let widths = std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim));
        let next = widths.clone().skip(1);
        widths.zip(next)
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// Number of parameters, `sum over layers of (fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Offset of the first weight of layer `layer` and of its bias block.
    fn offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for (l, (i, o)) in self.layers().enumerate() {
            if l == layer {
                return (off, off + i * o);
            }
            off += (i + 1) * o;
        }
        unreachable!("layer index out of range")
    }

    /// Range of the output layer inside the flat vector.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        let (w, _) = self.offsets(self.num_layers() - 1);
        w..self.param_count()
    }
}

/// Number of parameters of `arch`.
pub fn param_count(arch: &MlpArchitecture) -> usize {
    arch.param_count()
}

/// The optimization variable θ: a flat, finite vector of network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!("parameter {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn for_arch(arch: &MlpArchitecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(contract(format!(
                "parameter vector has length {}, architecture needs {}",
                values.len(),
                arch.param_count()
            )));
        }
        Self::new(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights and zero biases. The output layer is scaled by `output_scale`.
    pub fn init(arch: &MlpArchitecture, output_scale: f64, rng: &mut Stream) -> Self {
        let mut values = Vec::with_capacity(arch.param_count());
        let last = arch.num_layers() - 1;
        for (l, (fan_in, fan_out)) in arch.layers().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let scale = if l == last { output_scale } else { 1.0 };
            values.extend((0..fan_in * fan_out).map(|_| scale * dist.sample(rng)));
            values.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Max-norm distance to another vector of the same length.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// FNV-1a over the IEEE bit patterns, used to check that two runs start
    /// from the identical anchor.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.0 {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

impl AsRef<[f64]> for ParameterVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_shapes(params: &[f64], arch: &MlpArchitecture, input: &[f64]) -> Result<()> {
    if params.len() != arch.param_count() {
        return Err(contract(format!(
            "parameter vector has length {}, architecture needs {}",
            params.len(),
            arch.param_count()
        )));
    }
    if input.len() != arch.input_dim {
        return Err(contract(format!(
            "state has length {}, network expects {}",
            input.len(),
            arch.input_dim
        )));
    }
    Ok(())
}

/// One dense layer, `out = W x + b`.
#[inline]
fn dense(weights: &[f64], bias: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let fan_in = x.len();
    out.clear();
    out.extend(bias.iter().enumerate().map(|(o, b)| {
        let row = &weights[o * fan_in..(o + 1) * fan_in];
        b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
    }));
}

/// Network output (the action mean) for one state.
pub fn forward(params: &[f64], arch: &MlpArchitecture, state: &[f64]) -> Result<Vec<f64>> {
    check_shapes(params, arch, state)?;
    Ok(forward_cached(params, arch, state).output().to_vec())
}

/// Activations of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[L]` the linear output.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache has at least the input")
    }
}

/// Forward pass without shape checks. Callers validate once up front.
pub fn forward_cached(params: &[f64], arch: &MlpArchitecture, state: &[f64]) -> ForwardCache {
    let mut activations = Vec::with_capacity(arch.num_layers() + 1);
    activations.push(state.to_vec());
    let last = arch.num_layers() - 1;
    let mut off = 0;
    for (l, (fan_in, fan_out)) in arch.layers().enumerate() {
        let w = &params[off..off + fan_in * fan_out];
        let b = &params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        off += (fan_in + 1) * fan_out;
        let mut out = Vec::with_capacity(fan_out);
        dense(w, b, &activations[l], &mut out);
        if l != last {
            for v in &mut out {
                *v = arch.activation.apply(*v);
            }
        }
        activations.push(out);
    }
    ForwardCache { activations }
}

/// Reverse-mode pass: accumulates `d(loss)/d(params)` into `grad` given
/// `d(loss)/d(output)`.
pub fn backward(
    params: &[f64],
    arch: &MlpArchitecture,
    cache: &ForwardCache,
    grad_output: &[f64],
    grad: &mut [f64],
) {
    debug_assert_eq!(grad.len(), params.len());
    debug_assert_eq!(grad_output.len(), arch.output_dim);
    let layers: Vec<(usize, usize)> = arch.layers().collect();
    let mut delta = grad_output.to_vec();
    for l in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[l];
        let (w_off, b_off) = arch.offsets(l);
        let x = &cache.activations[l];
        for o in 0..fan_out {
            let d = delta[o];
            grad[b_off + o] += d;
            let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if l == 0 {
            break;
        }
        let w = &params[w_off..w_off + fan_in * fan_out];
        let mut prev = vec![0.0; fan_in];
        for o in 0..fan_out {
            let d = delta[o];
            for (p, wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                *p += d * wi;
            }
        }
        for (p, y) in prev.iter_mut().zip(x) {
            *p *= arch.activation.derivative_from_output(*y);
        }
        delta = prev;
    }
}

/// Fixed-std Gaussian exploration in action space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    action_std: f64,
}

impl GaussianHead {
    pub fn new(action_std: f64) -> Result<Self> {
        if !(action_std > 0.0 && action_std.is_finite()) {
            return Err(contract(format!("action std must be > 0, got {action_std}")));
        }
        Ok(Self { action_std })
    }

    pub fn action_std(&self) -> f64 {
        self.action_std
    }
}

/// How actions are chosen from the network's mean output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionMode {
    /// Evaluation: act with the mean.
    Deterministic,
    /// Training and ES rollouts: `mean + std * z`.
    Stochastic(GaussianHead),
}

/// `mean + σ_a z` with `z` standard normal drawn from `rng`.
pub fn sample_action(mean: &[f64], head: &GaussianHead, rng: &mut Stream) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + head.action_std * z
        })
        .collect()
}

fn choose_action(mean: Vec<f64>, mode: ActionMode, rng: &mut Stream) -> Vec<f64> {
    match mode {
        ActionMode::Deterministic => mean,
        ActionMode::Stochastic(head) => sample_action(&mean, &head, rng),
    }
}

/// One episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub discounted_return: f64,
    pub success: bool,
    /// Ended by the task rather than by the horizon.
    pub terminated: bool,
    pub final_state: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// `sum_t gamma^t r_t`, accumulated in forward time order.
pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// Episode length and discount used by a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSpec {
    pub gamma: f64,
    pub horizon: usize,
}

/// Runs one episode of the policy `params` on `env`, resetting it with
/// `env_seed`. Stops at task termination, at the env's own horizon, or after
/// `episode.horizon` steps, whichever comes first.
pub fn rollout(
    params: &[f64],
    arch: &MlpArchitecture,
    mode: ActionMode,
    env: &mut dyn Env,
    env_seed: u64,
    rng: &mut Stream,
    episode: EpisodeSpec,
) -> Result<Trajectory> {
    if !(episode.gamma > 0.0 && episode.gamma <= 1.0) {
        return Err(contract(format!("gamma must lie in (0, 1], got {}", episode.gamma)));
    }
    let mut obs = env.reset(env_seed);
    check_shapes(params, arch, &obs)?;
    if env.spec().action_dim != arch.output_dim {
        return Err(contract(format!(
            "policy emits {} actions, env expects {}",
            arch.output_dim,
            env.spec().action_dim
        )));
    }
    let horizon = episode.horizon.min(env.spec().horizon);
    let mut traj = Trajectory {
        states: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        discounted_return: 0.0,
        success: false,
        terminated: false,
        final_state: Vec::new(),
    };
    let mut discount = 1.0;
    for t in 0..horizon {
        let mean = forward_cached(params, arch, &obs).output().to_vec();
        let action = choose_action(mean, mode, rng);
        let step = env.step(&action)?;
        if !step.reward.is_finite() {
            return Err(Error::NonFiniteEnv { what: "reward", step: t });
        }
        if step.observation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEnv { what: "observation", step: t });
        }
        traj.discounted_return += discount * step.reward;
        discount *= episode.gamma;
        traj.states.push(std::mem::replace(&mut obs, step.observation));
        traj.actions.push(action);
        traj.rewards.push(step.reward);
        traj.success |= step.success;
        if step.terminated {
            traj.terminated = true;
            break;
        }
    }
    traj.final_state = obs;
    Ok(traj)
}

/// Uniform draw helper shared by the environments.
pub(crate) fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
