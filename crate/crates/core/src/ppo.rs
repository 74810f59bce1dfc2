//! PPO for the anchor policy.
//!
//! Actor: the same tanh MLP as the ES policy (it produces the action mean),
//! plus a state-independent learnable log-std vector. Critic: a separate MLP
//! with a scalar head. Gradients of the clipped surrogate, value loss and
//! entropy bonus are derived by hand and backpropagated through both
//! networks; see [`evaluate_objective`].

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::EnvFactory;
use crate::error::{contract, Error, Result};
use crate::policy::{backward, forward_cached, MlpArchitecture, ParameterVector};
use crate::rng::{derive_seed, stream, Domain, Stream};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient ascent with a fixed learning rate.
    #[default]
    Sgd,
    Adam,
}

/// Early Stage-1 exit once training success plateaus high enough.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Handoff {
    pub success_threshold: f64,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub episodes_per_update: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub hidden_dims: Vec<usize>,
    /// Initial value of every log-std entry.
    pub init_log_std: f64,
    pub optimizer: OptimizerKind,
    /// Rescale each minibatch gradient to at most this norm.
    pub max_grad_norm: Option<f64>,
    pub handoff: Option<Handoff>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            learning_rate: 0.05,
            episodes_per_update: 24,
            epochs: 5,
            minibatch_size: 256,
            value_coef: 0.5,
            entropy_coef: 0.0,
            hidden_dims: vec![64, 64],
            init_log_std: 0.5f64.ln(),
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: Some(5.0),
            handoff: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(contract(format!("clip_epsilon must lie in (0, 1), got {}", self.clip_epsilon)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(contract(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(contract(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(contract("learning_rate must be > 0"));
        }
        if self.episodes_per_update == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return Err(contract("episodes_per_update, epochs and minibatch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Actor and critic parameters in one flat vector:
/// `[policy MLP | log-std | value MLP]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub policy_arch: MlpArchitecture,
    pub value_arch: MlpArchitecture,
    pub theta: Vec<f64>,
}

impl ActorCritic {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut Stream) -> Result<Self> {
        let policy_arch = MlpArchitecture::new(obs_dim, hidden.to_vec(), action_dim)?;
        let value_arch = MlpArchitecture::new(obs_dim, hidden.to_vec(), 1)?;
        let mut theta = ParameterVector::init(&policy_arch, 0.01, rng).into_vec();
        theta.extend(std::iter::repeat(init_log_std).take(action_dim));
        theta.extend(ParameterVector::init(&value_arch, 1.0, rng).into_vec());
        Ok(Self { policy_arch, value_arch, theta })
    }

    fn policy_len(&self) -> usize {
        self.policy_arch.param_count()
    }

    fn action_dim(&self) -> usize {
        self.policy_arch.output_dim
    }

    pub fn policy_params(&self) -> &[f64] {
        &self.theta[..self.policy_len()]
    }

    pub fn log_std(&self) -> &[f64] {
        &self.theta[self.policy_len()..self.policy_len() + self.action_dim()]
    }

    pub fn value_params(&self) -> &[f64] {
        &self.theta[self.policy_len() + self.action_dim()..]
    }

    /// The mean network alone, as handed to ES.
    pub fn policy_vector(&self) -> ParameterVector {
        ParameterVector::new(self.policy_params().to_vec()).expect("finite policy parameters")
    }

    pub fn value(&self, state: &[f64]) -> f64 {
        forward_cached(self.value_params(), &self.value_arch, state).output()[0]
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        let mean = forward_cached(self.policy_params(), &self.policy_arch, state);
        gaussian_log_prob(mean.output(), self.log_std(), action)
    }
}

fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Generalized advantage estimates for one episode.
///
/// `bootstrap` is `V(s_T)` after the last recorded step, or 0 if the episode
/// terminated.
pub fn gae_advantages(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lam: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len(), "rewards and values must align");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 == n { bootstrap } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lam * running;
        adv[t] = running;
    }
    adv
}

/// Shifts and scales to mean 0 and (population) std 1. A constant input is
/// only centered.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    for a in adv.iter_mut() {
        *a -= mean;
    }
    let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        for a in adv.iter_mut() {
            *a /= std;
        }
    }
}

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

/// Transitions of one update, with advantages already normalized.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
    pub steps: u64,
}

/// Objective value, its parts, and (optionally) the gradient w.r.t. `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    /// surrogate - value_coef * value_loss + entropy_coef * entropy
    pub objective: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad: Option<Vec<f64>>,
}

/// The PPO objective on a minibatch, to be maximized:
///
/// ```text
/// L = mean_i min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i)
///     - c_v mean_i (V(s_i) - R_i)^2
///     + c_e Σ_k (log σ_k + ½ ln 2πe)
/// ```
///
/// with `ρ_i = exp(log π(a_i|s_i) - log π_old(a_i|s_i))`. When the unclipped
/// term is the minimum its gradient is `A_i ρ_i ∇ log π`; otherwise the clipped
/// term is constant in θ and contributes nothing.
pub fn evaluate_objective(
    ac: &ActorCritic,
    batch: &[&Transition],
    clip_epsilon: f64,
    value_coef: f64,
    entropy_coef: f64,
    want_grad: bool,
) -> ObjectiveEval {
    let b = batch.len().max(1) as f64;
    let p_len = ac.policy_len();
    let k = ac.action_dim();
    let log_std = ac.log_std();
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

    let mut grad = want_grad.then(|| vec![0.0; ac.theta.len()]);
    let mut surrogate = 0.0;
    let mut value_loss = 0.0;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    let mut grad_mean = vec![0.0; k];
    for tr in batch {
        let pcache = forward_cached(ac.policy_params(), &ac.policy_arch, &tr.state);
        let mean = pcache.output();
        let logp = gaussian_log_prob(mean, log_std, &tr.action);
        let ratio = (logp - tr.log_prob).exp();
        let clipped_ratio = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let unclipped_term = ratio * tr.advantage;
        let clipped_term = clipped_ratio * tr.advantage;
        let use_unclipped = unclipped_term <= clipped_term;
        surrogate += unclipped_term.min(clipped_term);
        if ratio != clipped_ratio {
            clipped += 1;
        }
        kl += tr.log_prob - logp;

        let vcache = forward_cached(ac.value_params(), &ac.value_arch, &tr.state);
        let v = vcache.output()[0];
        let verr = v - tr.value_target;
        value_loss += verr * verr;

        if let Some(g) = grad.as_mut() {
            if use_unclipped {
                let coeff = tr.advantage * ratio / b;
                for j in 0..k {
                    let diff = tr.action[j] - mean[j];
                    grad_mean[j] = coeff * diff * inv_var[j];
                    g[p_len + j] += coeff * (diff * diff * inv_var[j] - 1.0);
                }
                backward(ac.policy_params(), &ac.policy_arch, &pcache, &grad_mean, &mut g[..p_len]);
            }
            let dv = -value_coef * 2.0 * verr / b;
            backward(ac.value_params(), &ac.value_arch, &vcache, &[dv], &mut g[p_len + k..]);
        }
    }
    let entropy: f64 = log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum();
    if let Some(g) = grad.as_mut() {
        for j in 0..k {
            g[p_len + j] += entropy_coef;
        }
    }
    let surrogate = surrogate / b;
    let value_loss = value_loss / b;
    ObjectiveEval {
        objective: surrogate - value_coef * value_loss + entropy_coef * entropy,
        surrogate,
        value_loss,
        entropy,
        clip_fraction: clipped as f64 / b,
        approx_kl: kl / b,
        grad,
    }
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn ascend(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            theta[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Diagnostics of one collect/update cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    /// Cumulative environment steps after this update's collection.
    pub steps: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Result of Stage 1.
#[derive(Debug, Clone)]
pub struct AnchorTraining {
    pub actor_critic: ActorCritic,
    pub curve: Vec<UpdateRecord>,
    pub steps_used: u64,
}

impl AnchorTraining {
    pub fn policy(&self) -> ParameterVector {
        self.actor_critic.policy_vector()
    }
}

/// Collects up to `config.episodes_per_update` episodes, never starting one
/// that could overrun `remaining` steps.
fn collect(
    ac: &ActorCritic,
    factory: &dyn EnvFactory,
    config: &PpoConfig,
    horizon: usize,
    update: usize,
    remaining: u64,
    seed: u64,
) -> Result<RolloutBuffer> {
    let episodes = (remaining / horizon as u64).min(config.episodes_per_update as u64) as usize;
    let per_episode: Vec<(Vec<Transition>, f64, bool)> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut env = factory.make();
            let mut rng = stream(seed, Domain::PpoAction, update as u64, e as u64);
            let mut obs = env.reset(derive_seed(seed, Domain::PpoEnv, update as u64, e as u64));
            let std: Vec<f64> = ac.log_std().iter().map(|l| l.exp()).collect();
            let mut states = Vec::with_capacity(horizon);
            let mut actions = Vec::with_capacity(horizon);
            let mut logps = Vec::with_capacity(horizon);
            let mut rewards = Vec::with_capacity(horizon);
            let mut values = Vec::with_capacity(horizon);
            let mut success = false;
            let mut terminated = false;
            for t in 0..horizon {
                let mean = forward_cached(ac.policy_params(), &ac.policy_arch, &obs).output().to_vec();
                let action: Vec<f64> = mean
                    .iter()
                    .zip(&std)
                    .map(|(m, s)| {
                        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                        m + s * z
                    })
                    .collect();
                let logp = gaussian_log_prob(&mean, ac.log_std(), &action);
                let value = ac.value(&obs);
                let step = env.step(&action)?;
                if !step.reward.is_finite() || step.observation.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteEnv { what: "reward or observation", step: t });
                }
                states.push(std::mem::replace(&mut obs, step.observation));
                actions.push(action);
                logps.push(logp);
                rewards.push(step.reward);
                values.push(value);
                success |= step.success;
                if step.terminated {
                    terminated = true;
                    break;
                }
            }
            let bootstrap = if terminated { 0.0 } else { ac.value(&obs) };
            let adv = gae_advantages(&rewards, &values, bootstrap, config.gamma, config.gae_lambda);
            let ret = crate::policy::discounted_sum(&rewards, config.gamma);
            let transitions = states
                .into_iter()
                .zip(actions)
                .zip(logps)
                .zip(adv.iter().zip(&values))
                .map(|(((state, action), log_prob), (a, v))| Transition {
                    state,
                    action,
                    log_prob,
                    advantage: *a,
                    value_target: a + v,
                })
                .collect();
            Ok((transitions, ret, success))
        })
        .collect::<Result<_>>()?;

    let mut buffer = RolloutBuffer::default();
    for (tr, ret, success) in per_episode {
        buffer.steps += tr.len() as u64;
        buffer.transitions.extend(tr);
        buffer.episode_returns.push(ret);
        buffer.episode_successes.push(success);
    }
    let mut adv: Vec<f64> = buffer.transitions.iter().map(|t| t.advantage).collect();
    normalize_advantages(&mut adv);
    for (t, a) in buffer.transitions.iter_mut().zip(adv) {
        t.advantage = a;
    }
    Ok(buffer)
}

/// Runs `config.epochs` passes of minibatch gradient ascent over `buffer`.
pub fn ppo_update(ac: &mut ActorCritic, buffer: &RolloutBuffer, config: &PpoConfig, update: usize, seed: u64) -> Result<ObjectiveEval> {
    ppo_update_with(ac, buffer, config, update, seed, &mut None)
}

fn ppo_update_with(
    ac: &mut ActorCritic,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    update: usize,
    seed: u64,
    adam: &mut Option<Adam>,
) -> Result<ObjectiveEval> {
    if buffer.transitions.is_empty() {
        return Err(contract("cannot update on an empty buffer"));
    }
    let mut order: Vec<usize> = (0..buffer.transitions.len()).collect();
    let mut last = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(seed, Domain::Shuffle, update as u64, epoch as u64));
        for chunk in order.chunks(config.minibatch_size) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| &buffer.transitions[i]).collect();
            let eval = evaluate_objective(ac, &batch, config.clip_epsilon, config.value_coef, config.entropy_coef, true);
            let mut grad = eval.grad.clone().expect("gradient requested");
            if !eval.objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    update,
                    detail: format!(
                        "surrogate {} value loss {} entropy {}",
                        eval.surrogate, eval.value_loss, eval.entropy
                    ),
                });
            }
            if let Some(max) = config.max_grad_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    for g in &mut grad {
                        *g *= max / norm;
                    }
                }
            }
            match config.optimizer {
                OptimizerKind::Sgd => {
                    for (t, g) in ac.theta.iter_mut().zip(&grad) {
                        *t += config.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => adam
                    .get_or_insert_with(|| Adam::new(ac.theta.len()))
                    .ascend(&mut ac.theta, &grad, config.learning_rate),
            }
            last = Some(eval);
        }
    }
    let mut last = last.expect("at least one minibatch");
    last.grad = None;
    Ok(last)
}

/// Stage 1: PPO until `step_budget` environment steps are spent (or the
/// optional hand-off rule fires).
pub fn train_anchor(factory: &dyn EnvFactory, config: &PpoConfig, step_budget: u64, seed: u64) -> Result<AnchorTraining> {
    train_anchor_with(factory, config, step_budget, seed, |_| {})
}

/// [`train_anchor`] with a per-update progress callback.
pub fn train_anchor_with(
    factory: &dyn EnvFactory,
    config: &PpoConfig,
    step_budget: u64,
    seed: u64,
    mut on_update: impl FnMut(&UpdateRecord),
) -> Result<AnchorTraining> {
    config.validate()?;
    let spec = factory.make().spec().clone();
    let mut init_rng = stream(seed, Domain::Init, 0, 0);
    let mut ac = ActorCritic::new(spec.state_dim, spec.action_dim, &config.hidden_dims, config.init_log_std, &mut init_rng)?;
    let horizon = spec.horizon;
    let mut adam = None;
    let mut curve: Vec<UpdateRecord> = Vec::new();
    let mut steps_used = 0u64;
    for update in 0.. {
        let remaining = step_budget - steps_used;
        if remaining < horizon as u64 {
            break;
        }
        let buffer = collect(&ac, factory, config, horizon, update, remaining, seed)?;
        steps_used += buffer.steps;
        let eval = ppo_update_with(&mut ac, &buffer, config, update, seed, &mut adam)?;
        let episodes = buffer.episode_returns.len();
        let record = UpdateRecord {
            update,
            steps: steps_used,
            episodes,
            mean_return: buffer.episode_returns.iter().sum::<f64>() / episodes as f64,
            success_rate: buffer.episode_successes.iter().filter(|s| **s).count() as f64 / episodes as f64,
            surrogate: eval.surrogate,
            value_loss: eval.value_loss,
            entropy: eval.entropy,
            clip_fraction: eval.clip_fraction,
            approx_kl: eval.approx_kl,
        };
        log::debug!("ppo update {update}: return {:.3} success {:.2}", record.mean_return, record.success_rate);
        on_update(&record);
        curve.push(record);
        if let Some(h) = config.handoff {
            if h.window > 0 && curve.len() >= h.window {
                let recent = &curve[curve.len() - h.window..];
                let avg = recent.iter().map(|r| r.success_rate).sum::<f64>() / h.window as f64;
                if avg >= h.success_threshold {
                    break;
                }
            }
        }
    }
    Ok(AnchorTraining { actor_critic: ac, curve, steps_used })
}
