//! The ES generation loop.
//!
//! Each generation draws a perturbation batch, evaluates all `2m` antithetic
//! candidates (in parallel, results gathered in index order), turns the
//! returns into scores, takes the step `θ ← θ + α g`, and moves to the next
//! perturbation scale `σ(t) = max(σ(0) λ^t, σ_min)`.
//!
//! All randomness is keyed by `(seed, generation, index)`, so the state needed
//! to continue a run is just [`EsState`].

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::EnvFactory;
use crate::error::{contract, Error, Result};
use crate::estimator::{antithetic_gradient, centered_ranks, ReturnTable, ScoreTransform};
use crate::perturb::{antithetic_candidates, make_batch, NoiseDistribution, NoiseKind};
use crate::policy::{rollout, ActionMode, EpisodeSpec, GaussianHead, MlpArchitecture, ParameterVector};
use crate::rng::{derive_seed, stream_from_seed, Domain};

fn default_episodes() -> usize {
    1
}

fn default_center_eval() -> usize {
    1
}

fn default_alpha_decay() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsConfig {
    /// Initial perturbation scale σ_ES(0).
    pub sigma_es: f64,
    /// Step size α.
    pub alpha: f64,
    /// Antithetic pairs per generation.
    pub pairs: usize,
    /// Maximum number of generations.
    pub generations: usize,
    pub lambda_sigma: f64,
    pub sigma_min: f64,
    pub noise: NoiseDistribution,
    /// Action-space std σ_a used by candidate rollouts.
    pub action_std: f64,
    pub seed: u64,
    #[serde(default = "default_episodes")]
    pub episodes_per_candidate: usize,
    #[serde(default)]
    pub transform: ScoreTransform,
    /// Per-generation multiplier on α. 1.0 keeps α constant.
    #[serde(default = "default_alpha_decay")]
    pub alpha_decay: f64,
    /// Hard cap on environment steps spent on candidate rollouts.
    #[serde(default)]
    pub step_cap: Option<u64>,
    /// Deterministic center evaluations per generation, for logging only.
    #[serde(default = "default_center_eval")]
    pub center_eval_episodes: usize,
}

impl EsConfig {
    /// Defaults used for refinement: σ_ES = 0.03, α = 0.01, λ_σ = 0.99,
    /// σ_min = 1e-3, σ_a = 0.01.
    pub fn tdes(seed: u64) -> Self {
        Self {
            sigma_es: 0.03,
            alpha: 0.01,
            pairs: 8,
            generations: 100,
            lambda_sigma: 0.99,
            sigma_min: 1e-3,
            noise: NoiseDistribution::triangular(),
            action_std: 0.01,
            seed,
            episodes_per_candidate: 1,
            transform: ScoreTransform::CenteredRanks,
            alpha_decay: 1.0,
            step_cap: None,
            center_eval_episodes: 1,
        }
    }

    /// The same settings with unbounded Gaussian noise.
    pub fn with_kind(mut self, kind: NoiseKind) -> Self {
        self.noise = NoiseDistribution { kind, ..self.noise };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(contract(format!("{name} must be > 0, got {v}")))
            }
        };
        positive(self.sigma_es, "sigma_es")?;
        positive(self.alpha, "alpha")?;
        positive(self.action_std, "action_std")?;
        positive(self.alpha_decay, "alpha_decay")?;
        self.noise.validate()?;
        if self.pairs == 0 {
            return Err(contract("pairs must be >= 1"));
        }
        if self.episodes_per_candidate == 0 {
            return Err(contract("episodes_per_candidate must be >= 1"));
        }
        if !(self.lambda_sigma > 0.0 && self.lambda_sigma <= 1.0) {
            return Err(contract(format!("lambda_sigma must lie in (0, 1], got {}", self.lambda_sigma)));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_es) {
            return Err(contract(format!(
                "sigma_min must lie in [0, sigma_es], got {} with sigma_es {}",
                self.sigma_min, self.sigma_es
            )));
        }
        Ok(())
    }

    /// Perturbation scale in effect during generation `t`.
    pub fn sigma_at(&self, t: usize) -> f64 {
        (self.sigma_es * self.lambda_sigma.powi(t as i32)).max(self.sigma_min)
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha * self.alpha_decay.powi(t as i32)
    }

    /// Rollouts per generation.
    pub fn rollouts_per_generation(&self) -> usize {
        2 * self.pairs * self.episodes_per_candidate
    }
}

/// One candidate evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub ret: f64,
    pub steps: u64,
    pub success: bool,
}

/// Stream seeds for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSeeds {
    pub env: u64,
    pub action_noise: u64,
}

/// Something the engine can score a parameter vector on.
pub trait Objective: Sync {
    fn evaluate(&self, params: &[f64], seeds: EpisodeSeeds) -> Result<Evaluation>;

    /// Deterministic evaluation used for center logging.
    fn evaluate_deterministic(&self, params: &[f64], seeds: EpisodeSeeds) -> Result<Evaluation> {
        self.evaluate(params, seeds)
    }

    /// Upper bound on the steps one evaluation may consume.
    fn max_steps(&self) -> u64;
}

/// Episodic return of an MLP policy on freshly seeded environments.
pub struct PolicyObjective<'a> {
    pub arch: &'a MlpArchitecture,
    pub factory: &'a dyn EnvFactory,
    pub head: GaussianHead,
    pub episode: EpisodeSpec,
}

impl PolicyObjective<'_> {
    fn run(&self, params: &[f64], seeds: EpisodeSeeds, mode: ActionMode) -> Result<Evaluation> {
        let mut env = self.factory.make();
        let mut rng = stream_from_seed(seeds.action_noise);
        let traj = rollout(params, self.arch, mode, env.as_mut(), seeds.env, &mut rng, self.episode)?;
        Ok(Evaluation { ret: traj.discounted_return, steps: traj.len() as u64, success: traj.success })
    }
}

impl Objective for PolicyObjective<'_> {
    fn evaluate(&self, params: &[f64], seeds: EpisodeSeeds) -> Result<Evaluation> {
        self.run(params, seeds, ActionMode::Stochastic(self.head))
    }

    fn evaluate_deterministic(&self, params: &[f64], seeds: EpisodeSeeds) -> Result<Evaluation> {
        self.run(params, seeds, ActionMode::Deterministic)
    }

    fn max_steps(&self) -> u64 {
        self.episode.horizon as u64
    }
}

/// A closed-form objective; each evaluation counts as one step.
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn evaluate(&self, params: &[f64], _seeds: EpisodeSeeds) -> Result<Evaluation> {
        Ok(Evaluation { ret: (self.0)(params), steps: 1, success: false })
    }

    fn max_steps(&self) -> u64 {
        1
    }
}

/// Summary of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub sigma_es: f64,
    pub alpha: f64,
    pub g_norm: f64,
    pub coord_variance: f64,
    #[serde(with = "crate::checkpoint::float_or_tag")]
    pub update_ratio: f64,
    pub mean_return: f64,
    pub best_return: f64,
    /// Deterministic return of the pre-update center, if evaluated.
    pub center_return: Option<f64>,
    /// Largest `|θ± - θ|` coordinate over all candidates.
    pub max_offset: f64,
    /// Cumulative candidate-rollout steps after this generation.
    pub steps: u64,
    pub wall_ms: u64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsState {
    pub params: ParameterVector,
    /// Next generation to run.
    pub generation: usize,
    pub steps_used: u64,
    pub history: Vec<GenerationRecord>,
}

impl EsState {
    pub fn start(anchor: ParameterVector) -> Self {
        Self { params: anchor, generation: 0, steps_used: 0, history: Vec::new() }
    }

    pub fn sigma(&self, config: &EsConfig) -> f64 {
        config.sigma_at(self.generation)
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    BudgetExhausted,
    Interrupted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsOutcome {
    pub state: EsState,
    pub stop: StopReason,
}

impl EsOutcome {
    pub fn params(&self) -> &ParameterVector {
        &self.state.params
    }

    pub fn history(&self) -> &[GenerationRecord] {
        &self.state.history
    }
}

/// What the caller wants after each generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Seeds for rollout `episode` of pair `pair` in `generation`. Both members
/// of a pair share them.
pub fn candidate_seeds(seed: u64, generation: usize, pair: usize, episode: usize, episodes: usize) -> EpisodeSeeds {
    let ix = (pair * episodes + episode) as u64;
    EpisodeSeeds {
        env: derive_seed(seed, Domain::EnvReset, generation as u64, ix),
        action_noise: derive_seed(seed, Domain::ActionNoise, generation as u64, ix),
    }
}

fn center_seeds(seed: u64, episode: usize) -> EpisodeSeeds {
    EpisodeSeeds {
        env: derive_seed(seed, Domain::Eval, 0, episode as u64),
        action_noise: derive_seed(seed, Domain::Eval, 1, episode as u64),
    }
}

/// Whether another generation fits under the step cap in the worst case.
fn generation_fits(state: &EsState, config: &EsConfig, objective: &dyn Objective) -> bool {
    match config.step_cap {
        None => true,
        Some(cap) => {
            let worst = config.rollouts_per_generation() as u64 * objective.max_steps();
            state.steps_used + worst <= cap
        }
    }
}

/// Runs a single generation and advances `state`.
pub fn run_generation<O: Objective + ?Sized>(state: &mut EsState, objective: &O, config: &EsConfig) -> Result<GenerationRecord> {
    let started = Instant::now();
    let t = state.generation;
    let sigma = config.sigma_at(t);
    let alpha = config.alpha_at(t);
    let dim = state.params.len();
    let batch = make_batch(&config.noise, sigma, config.pairs, dim, t as u64, config.seed)?;
    let pairs = antithetic_candidates(&state.params, &batch)?;
    let max_offset = pairs
        .iter()
        .flat_map(|p| p.offset.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let episodes = config.episodes_per_candidate;
    // Job j covers pair j / (2E), sign (j / E) % 2, episode j % E.
    let jobs = config.rollouts_per_generation();
    let evals: Vec<Evaluation> = (0..jobs)
        .into_par_iter()
        .map(|j| {
            let pair = j / (2 * episodes);
            let minus = (j / episodes) % 2 == 1;
            let episode = j % episodes;
            let params = if minus { &pairs[pair].minus } else { &pairs[pair].plus };
            let seeds = candidate_seeds(config.seed, t, pair, episode, episodes);
            let e = objective.evaluate(params.as_slice(), seeds)?;
            if !e.ret.is_finite() {
                return Err(Error::NonFiniteReturn { generation: t, candidate: 2 * pair + minus as usize });
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;

    let mut plus = Vec::with_capacity(config.pairs);
    let mut minus = Vec::with_capacity(config.pairs);
    let mut steps = 0u64;
    for (pair, chunk) in evals.chunks(2 * episodes).enumerate() {
        let (p, m) = chunk.split_at(episodes);
        let avg = |xs: &[Evaluation]| xs.iter().map(|e| e.ret).sum::<f64>() / episodes as f64;
        plus.push(avg(p));
        minus.push(avg(m));
        steps += chunk.iter().map(|e| e.steps).sum::<u64>();
        debug_assert_eq!(pair, plus.len() - 1);
    }
    let table = ReturnTable::new(plus, minus)?;
    let estimate = match config.transform {
        ScoreTransform::Raw => antithetic_gradient(&batch, &table.plus, &table.minus)?,
        ScoreTransform::CenteredRanks => {
            let ranks = centered_ranks(&table)?;
            antithetic_gradient(&batch, &ranks.plus, &ranks.minus)?
        }
    };

    let center_return = if config.center_eval_episodes > 0 {
        let total: f64 = (0..config.center_eval_episodes)
            .map(|e| objective.evaluate_deterministic(state.params.as_slice(), center_seeds(config.seed, e)).map(|v| v.ret))
            .sum::<Result<f64>>()?;
        Some(total / config.center_eval_episodes as f64)
    } else {
        None
    };

    let update_ratio = estimate.update_ratio(alpha, state.params.as_slice());
    let mut next = state.params.clone();
    for (p, g) in next.as_mut_slice().iter_mut().zip(&estimate.g) {
        *p += alpha * g;
    }
    if !next.is_finite() {
        return Err(Error::NonFiniteReturn { generation: t, candidate: usize::MAX });
    }

    state.params = next;
    state.steps_used += steps;
    state.generation += 1;
    let record = GenerationRecord {
        generation: t,
        sigma_es: sigma,
        alpha,
        g_norm: estimate.diagnostics.g_norm,
        coord_variance: estimate.diagnostics.coord_variance,
        update_ratio,
        mean_return: table.mean(),
        best_return: table.best(),
        center_return,
        max_offset,
        steps: state.steps_used,
        wall_ms: started.elapsed().as_millis() as u64,
    };
    state.history.push(record.clone());
    Ok(record)
}

/// Continues `state` until `config.generations`, the step cap, or the
/// callback asks to stop. The callback sees the state after every generation.
pub fn run_from<O, C>(mut state: EsState, objective: &O, config: &EsConfig, mut after_generation: C) -> Result<EsOutcome>
where
    O: Objective,
    C: FnMut(&EsState, &GenerationRecord) -> Result<Control>,
{
    config.validate()?;
    while state.generation < config.generations {
        if !generation_fits(&state, config, objective) {
            log::debug!("step cap reached at generation {}", state.generation);
            return Ok(EsOutcome { state, stop: StopReason::BudgetExhausted });
        }
        let record = run_generation(&mut state, objective, config)?;
        if after_generation(&state, &record)? == Control::Stop && state.generation < config.generations {
            return Ok(EsOutcome { state, stop: StopReason::Interrupted });
        }
    }
    Ok(EsOutcome { state, stop: StopReason::Completed })
}

/// Full TD-ES run from `anchor` with the configured (triangular) noise.
pub fn tdes_run<O: Objective>(anchor: ParameterVector, objective: &O, config: &EsConfig) -> Result<EsOutcome> {
    run_from(EsState::start(anchor), objective, config, |_, _| Ok(Control::Continue))
}

/// The ablation twin: identical loop with Gaussian perturbations.
pub fn gaussian_es_run<O: Objective>(anchor: ParameterVector, objective: &O, config: &EsConfig) -> Result<EsOutcome> {
    let config = config.clone().with_kind(NoiseKind::Gaussian);
    tdes_run(anchor, objective, &config)
}

/// Deterministic-action evaluation over independently seeded episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterEvaluation {
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

/// Evaluates `params` with mean actions on `episodes` environments whose
/// reset seeds derive from `seed`.
pub fn evaluate_center(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    factory: &dyn EnvFactory,
    episode: EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<CenterEvaluation> {
    if episodes == 0 {
        return Err(contract("need at least one evaluation episode"));
    }
    let results: Vec<(f64, bool)> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut env = factory.make();
            let mut rng = stream_from_seed(derive_seed(seed, Domain::Eval, 2, e as u64));
            let env_seed = derive_seed(seed, Domain::Eval, 3, e as u64);
            let traj = rollout(params.as_slice(), arch, ActionMode::Deterministic, env.as_mut(), env_seed, &mut rng, episode)?;
            Ok((traj.discounted_return, traj.success))
        })
        .collect::<Result<_>>()?;
    let mean_return = results.iter().map(|r| r.0).sum::<f64>() / episodes as f64;
    let success_rate = results.iter().filter(|r| r.1).count() as f64 / episodes as f64;
    Ok(CenterEvaluation { mean_return, success_rate, episodes })
}
