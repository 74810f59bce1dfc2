//! Two-stage schedules and multi-seed sweeps.
//!
//! Every method in a plan gets the same environment-step budget `B`:
//!
//! - `ppo_only` spends all of `B` in PPO.
//! - `ppo_then_tdes` / `ppo_then_gaussian_es` spend `floor(split * B)` in PPO
//!   and whatever PPO left over in ES. The ES generation count is
//!   `floor(remaining / (2 m E H))` and the engine's step cap is `remaining`.
//!
//! Within one seed, both two-stage methods start ES from the same anchor. A
//! sweep therefore runs in two phases: anchors and `ppo_only` cells first,
//! then the ES cells. Cells are independent jobs on a pool of `workers`
//! threads; all randomness is keyed by seed, so results do not depend on the
//! worker count.
//!
//! Results layout under the output directory:
//!
//! ```text
//! plan.json
//! failures.json
//! runs/<task>/anchors/seed-<s>.json
//! runs/<task>/<method>/<seed>/status.json
//! runs/<task>/<method>/<seed>/checkpoints/{anchor,latest}.json
//! runs/<task>/<method>/<seed>/log.csv
//! runs/<task>/<method>/<seed>/record.json
//! ```
//!
//! A cell is finished once `record.json` exists (completed or failed).
//! [`resume`] re-runs unfinished cells: an ES cell continues from
//! `latest.json` (or from its anchor copy if no generation completed), a cell
//! still in PPO restarts its deterministic PPO stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic, Checkpoint, Stage};
use crate::engine::{evaluate_center, run_from, Control, EsConfig, EsState, GenerationRecord, PolicyObjective, StopReason};
use crate::envs::TaskId;
use crate::error::{contract, io_err, Error, Result};
use crate::estimator::ScoreTransform;
use crate::perturb::{NoiseDistribution, NoiseKind};
use crate::policy::{EpisodeSpec, GaussianHead};
use crate::ppo::{train_anchor, PpoConfig, UpdateRecord};
use crate::runlog::{rows_for_run, write_log};
use crate::stats::{aggregate, AggregateReport, BootstrapConfig, ScoreMatrix};

/// Environment variable that replaces a plan's seed list.
pub const SEED_ENV: &str = "REFINE_ES_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PpoOnly,
    PpoThenTdes,
    PpoThenGaussianEs,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PpoOnly, Method::PpoThenTdes, Method::PpoThenGaussianEs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PpoOnly => "ppo_only",
            Method::PpoThenTdes => "ppo_then_tdes",
            Method::PpoThenGaussianEs => "ppo_then_gaussian_es",
        }
    }

    /// Noise family of the ES stage, if there is one.
    pub fn es_kind(self) -> Option<NoiseKind> {
        match self {
            Method::PpoOnly => None,
            Method::PpoThenTdes => Some(NoiseKind::Triangular),
            Method::PpoThenGaussianEs => Some(NoiseKind::Gaussian),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Plan(format!("unknown method `{s}`")))
    }
}

/// ES hyperparameters shared by both ES methods of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsSettings {
    pub sigma_es: f64,
    pub alpha: f64,
    pub pairs: usize,
    pub lambda_sigma: f64,
    pub sigma_min: f64,
    pub action_std: f64,
    pub episodes_per_candidate: usize,
    pub transform: ScoreTransform,
    pub alpha_decay: f64,
    /// Rescale triangular noise to unit variance.
    pub standardize: bool,
    /// Upper limit on generations in addition to the budget-derived count.
    pub max_generations: Option<usize>,
    /// Deterministic center evaluations per generation (logged, not budgeted).
    pub center_eval_episodes: usize,
}

impl Default for EsSettings {
    fn default() -> Self {
        let d = EsConfig::tdes(0);
        Self {
            sigma_es: d.sigma_es,
            alpha: d.alpha,
            pairs: d.pairs,
            lambda_sigma: d.lambda_sigma,
            sigma_min: d.sigma_min,
            action_std: d.action_std,
            episodes_per_candidate: d.episodes_per_candidate,
            transform: d.transform,
            alpha_decay: d.alpha_decay,
            standardize: false,
            max_generations: None,
            center_eval_episodes: d.center_eval_episodes,
        }
    }
}

impl EsSettings {
    /// Engine config for one ES stage with `remaining` steps of budget on a
    /// task of horizon `horizon`.
    pub fn config(&self, kind: NoiseKind, seed: u64, remaining: u64, horizon: usize) -> EsConfig {
        let mut noise = NoiseDistribution::of_kind(kind);
        noise.standardize = self.standardize && kind == NoiseKind::Triangular;
        let per_generation = (2 * self.pairs * self.episodes_per_candidate * horizon) as u64;
        let mut generations = (remaining / per_generation.max(1)) as usize;
        if let Some(cap) = self.max_generations {
            generations = generations.min(cap);
        }
        EsConfig {
            sigma_es: self.sigma_es,
            alpha: self.alpha,
            pairs: self.pairs,
            generations,
            lambda_sigma: self.lambda_sigma,
            sigma_min: self.sigma_min,
            noise,
            action_std: self.action_std,
            seed,
            episodes_per_candidate: self.episodes_per_candidate,
            transform: self.transform,
            alpha_decay: self.alpha_decay,
            step_cap: Some(remaining),
            center_eval_episodes: self.center_eval_episodes,
        }
    }
}

fn default_split() -> f64 {
    0.67
}

fn default_seeds() -> Vec<u64> {
    (0..9).collect()
}

fn default_eval_episodes() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub task: TaskId,
    pub methods: Vec<Method>,
    /// Environment steps per run, identical for every method.
    pub total_step_budget: u64,
    /// Fraction of the budget given to PPO by two-stage methods.
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Deterministic episodes in the final evaluation.
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub es: EsSettings,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
}

impl ExperimentPlan {
    pub fn new(task: TaskId, methods: Vec<Method>, total_step_budget: u64) -> Self {
        Self {
            task,
            methods,
            total_step_budget,
            split: default_split(),
            seeds: default_seeds(),
            eval_episodes: default_eval_episodes(),
            ppo: PpoConfig::default(),
            es: EsSettings::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }

    /// Parses and validates plan JSON; parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Plan(msg) => Error::Plan(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Plan(m));
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        for (name, n, unique) in [
            ("methods", self.methods.len(), self.methods.iter().collect::<std::collections::BTreeSet<_>>().len()),
            ("seeds", self.seeds.len(), self.seeds.iter().collect::<std::collections::BTreeSet<_>>().len()),
        ] {
            if n != unique {
                return bad(format!("{name} contain duplicates"));
            }
        }
        if self.total_step_budget == 0 {
            return bad("total_step_budget must be > 0".into());
        }
        // split = 1 is allowed and leaves nothing for ES.
        if !(self.split > 0.0 && self.split <= 1.0) {
            return bad(format!("split must lie in (0, 1], got {}", self.split));
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be >= 1".into());
        }
        self.ppo.validate().map_err(|e| Error::Plan(format!("ppo: {e}")))?;
        self.es
            .config(NoiseKind::Triangular, 0, 0, 1)
            .validate()
            .map_err(|e| Error::Plan(format!("es: {e}")))?;
        if self.bootstrap.resamples == 0 || !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            return bad("bootstrap needs resamples >= 1 and level in (0, 1)".into());
        }
        Ok(())
    }

    /// PPO budget of `method`.
    pub fn ppo_budget(&self, method: Method) -> u64 {
        match method {
            Method::PpoOnly => self.total_step_budget,
            _ => (self.split * self.total_step_budget as f64).floor() as u64,
        }
    }

    /// Replaces the seed list with the value of [`SEED_ENV`], if set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(value) = std::env::var(SEED_ENV) {
            self.seeds = parse_seed_list(&value)?;
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellKey> {
        self.methods
            .iter()
            .flat_map(|&method| self.seeds.iter().map(move |&seed| CellKey { task: self.task, method, seed }))
            .collect()
    }
}

/// Parses `"3"`, `"1,4,7"` or `"0..5"` (half-open).
pub fn parse_seed_list(value: &str) -> Result<Vec<u64>> {
    let value = value.trim();
    let bad = || Error::Plan(format!("{SEED_ENV}: cannot parse `{value}` as a seed list"));
    let seeds: Vec<u64> = if let Some((a, b)) = value.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        value.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// Identifies one (task, method, seed) run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub task: TaskId,
    pub method: Method,
    pub seed: u64,
}

impl CellKey {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join("runs").join(self.task.as_str()).join(self.method.as_str()).join(self.seed.to_string())
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.task, self.method, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Result of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: TaskId,
    pub method: Method,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub step_budget: u64,
    pub ppo_steps: u64,
    pub es_steps: u64,
    pub steps_consumed: u64,
    /// Deterministic success rate of the final policy.
    pub final_success_rate: Option<f64>,
    pub final_mean_return: Option<f64>,
    /// Deterministic success rate of the PPO anchor (two-stage methods).
    pub anchor_success_rate: Option<f64>,
    pub anchor_fingerprint: Option<String>,
    pub final_fingerprint: Option<String>,
    pub es_generations: usize,
    pub es_stop: Option<StopReason>,
    pub ppo_curve: Vec<UpdateRecord>,
    pub es_curve: Vec<GenerationRecord>,
}

impl RunRecord {
    fn failed(key: CellKey, budget: u64, cause: &Error) -> Self {
        Self {
            task: key.task,
            method: key.method,
            seed: key.seed,
            status: RunStatus::Failed,
            error: Some(cause.to_string()),
            step_budget: budget,
            ppo_steps: 0,
            es_steps: 0,
            steps_consumed: 0,
            final_success_rate: None,
            final_mean_return: None,
            anchor_success_rate: None,
            anchor_fingerprint: None,
            final_fingerprint: None,
            es_generations: 0,
            es_stop: None,
            ppo_curve: Vec::new(),
            es_curve: Vec::new(),
        }
    }

    pub fn key(&self) -> CellKey {
        CellKey { task: self.task, method: self.method, seed: self.seed }
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Per-cell progress marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CellStage {
    Ppo,
    Es,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct CellStatus {
    stage: CellStage,
}

/// Called after every ES generation with the cell and the number of finished
/// generations; returning `true` stops that cell after its checkpoint is
/// written, as if the process had been killed.
pub type StopHook = Arc<dyn Fn(&CellKey, usize) -> bool + Send + Sync>;

#[derive(Clone, Default)]
pub struct SweepOptions {
    /// Parallel cells; `None` uses the available parallelism.
    pub workers: Option<usize>,
    pub stop_hook: Option<StopHook>,
}

/// Outcome of [`sweep`] or [`resume`].
#[derive(Debug, Clone)]
pub struct SweepSummary {
    /// Finished cells in plan order.
    pub records: Vec<RunRecord>,
    /// Cells left unfinished by a stop hook.
    pub interrupted: Vec<CellKey>,
    /// Aggregate over completed cells, if any.
    pub report: Option<AggregateReport>,
}

impl SweepSummary {
    pub fn failures(&self) -> Vec<&RunRecord> {
        self.records.iter().filter(|r| !r.is_completed()).collect()
    }
}

/// One entry of `failures.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub cell: String,
    pub error: String,
}

#[allow(clippy::large_enum_variant)] // short-lived, one per cell
enum CellOutcome {
    Done(RunRecord),
    Interrupted,
}

fn hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn anchor_cache_path(root: &Path, task: TaskId, seed: u64) -> PathBuf {
    root.join("runs").join(task.as_str()).join("anchors").join(format!("seed-{seed}.json"))
}

struct Runner<'a> {
    plan: &'a ExperimentPlan,
    root: &'a Path,
    stop_hook: Option<StopHook>,
}

impl Runner<'_> {
    fn episode(&self) -> EpisodeSpec {
        let spec = self.plan.task.spec();
        EpisodeSpec { gamma: spec.gamma, horizon: spec.horizon }
    }

    /// Stage 1 for two-stage methods, shared by every method of `seed`.
    fn anchor(&self, seed: u64) -> Result<Checkpoint> {
        let path = anchor_cache_path(self.root, self.plan.task, seed);
        if path.exists() {
            match checkpoint::load(&path) {
                Ok(ckpt) if ckpt.stage == Stage::Ppo => return Ok(ckpt),
                Ok(_) => log::warn!("{}: not a PPO checkpoint; retraining", path.display()),
                Err(e) => log::warn!("{e}; retraining anchor"),
            }
        }
        let budget = self.plan.ppo_budget(Method::PpoThenTdes);
        let ckpt = self.train_ppo(seed, budget)?;
        checkpoint::save(&path, &ckpt)?;
        Ok(ckpt)
    }

    fn train_ppo(&self, seed: u64, budget: u64) -> Result<Checkpoint> {
        let out = train_anchor(&self.plan.task, &self.plan.ppo, budget, seed)?;
        let arch = out.actor_critic.policy_arch.clone();
        Checkpoint::anchor(arch, out.policy(), &self.plan.ppo, seed, out.steps_used, out.curve)
    }

    fn set_status(&self, key: CellKey, stage: CellStage) -> Result<()> {
        write_json(&key.dir(self.root).join("status.json"), &CellStatus { stage })
    }

    fn finish(&self, key: CellKey, result: Result<CellOutcome>) -> Option<RunRecord> {
        let record = match result {
            Ok(CellOutcome::Done(r)) => r,
            Ok(CellOutcome::Interrupted) => return None,
            Err(e) => {
                log::error!("{key}: {e}");
                RunRecord::failed(key, self.plan.total_step_budget, &e)
            }
        };
        if let Err(e) = write_json(&key.dir(self.root).join("record.json"), &record) {
            log::error!("{key}: could not write record: {e}");
        }
        Some(record)
    }

    fn run_ppo_only(&self, key: CellKey) -> Result<CellOutcome> {
        let dir = key.dir(self.root);
        self.set_status(key, CellStage::Ppo)?;
        let ckpt = self.train_ppo(key.seed, self.plan.total_step_budget)?;
        checkpoint::save(&dir.join("checkpoints").join("anchor.json"), &ckpt)?;
        write_log(&dir.join("log.csv"), &rows_for_run(&ckpt.ppo_curve, &[], ckpt.rng.steps_used))?;
        let eval = evaluate_center(&ckpt.params, &ckpt.architecture, &self.plan.task, self.episode(), self.plan.eval_episodes, key.seed)?;
        Ok(CellOutcome::Done(RunRecord {
            task: key.task,
            method: key.method,
            seed: key.seed,
            status: RunStatus::Completed,
            error: None,
            step_budget: self.plan.total_step_budget,
            ppo_steps: ckpt.rng.steps_used,
            es_steps: 0,
            steps_consumed: ckpt.rng.steps_used,
            final_success_rate: Some(eval.success_rate),
            final_mean_return: Some(eval.mean_return),
            anchor_success_rate: None,
            anchor_fingerprint: None,
            final_fingerprint: Some(hex(ckpt.params.fingerprint())),
            es_generations: 0,
            es_stop: None,
            ppo_curve: ckpt.ppo_curve,
            es_curve: Vec::new(),
        }))
    }

    /// ES stage of a two-stage cell, from `anchor` or from a saved ES state.
    fn run_es(&self, key: CellKey, anchor: &Checkpoint, saved: Option<Checkpoint>) -> Result<CellOutcome> {
        let dir = key.dir(self.root);
        let ckpt_dir = dir.join("checkpoints");
        let kind = key.method.es_kind().ok_or_else(|| contract("ppo_only has no ES stage"))?;
        let ppo_steps = anchor.rng.steps_used;
        let remaining = self.plan.total_step_budget.saturating_sub(ppo_steps);
        let (state, config) = match saved {
            Some(s) => (s.es_state(), s.es_config()?),
            None => {
                checkpoint::save(&ckpt_dir.join("anchor.json"), anchor)?;
                self.set_status(key, CellStage::Es)?;
                let config = self.plan.es.config(kind, key.seed, remaining, self.episode().horizon);
                (EsState::start(anchor.params.clone()), config)
            }
        };
        let objective = PolicyObjective {
            arch: &anchor.architecture,
            factory: &self.plan.task,
            head: GaussianHead::new(config.action_std)?,
            episode: self.episode(),
        };
        let latest = ckpt_dir.join("latest.json");
        let log_path = dir.join("log.csv");
        let outcome = run_from(state, &objective, &config, |state, _| {
            checkpoint::save(&latest, &Checkpoint::from_es_state(anchor.architecture.clone(), state, &config)?)?;
            write_log(&log_path, &rows_for_run(&anchor.ppo_curve, &state.history, ppo_steps))?;
            let stop = self.stop_hook.as_ref().is_some_and(|h| h(&key, state.generation));
            Ok(if stop { Control::Stop } else { Control::Continue })
        })?;
        if outcome.stop == StopReason::Interrupted {
            log::info!("{key}: stopped after generation {}", outcome.state.generation);
            return Ok(CellOutcome::Interrupted);
        }
        write_log(&log_path, &rows_for_run(&anchor.ppo_curve, &outcome.state.history, ppo_steps))?;
        let episode = self.episode();
        let n = self.plan.eval_episodes;
        let anchor_eval = evaluate_center(&anchor.params, &anchor.architecture, &self.plan.task, episode, n, key.seed)?;
        let eval = evaluate_center(outcome.params(), &anchor.architecture, &self.plan.task, episode, n, key.seed)?;
        let es_steps = outcome.state.steps_used;
        Ok(CellOutcome::Done(RunRecord {
            task: key.task,
            method: key.method,
            seed: key.seed,
            status: RunStatus::Completed,
            error: None,
            step_budget: self.plan.total_step_budget,
            ppo_steps,
            es_steps,
            steps_consumed: ppo_steps + es_steps,
            final_success_rate: Some(eval.success_rate),
            final_mean_return: Some(eval.mean_return),
            anchor_success_rate: Some(anchor_eval.success_rate),
            anchor_fingerprint: Some(hex(anchor.params.fingerprint())),
            final_fingerprint: Some(hex(outcome.params().fingerprint())),
            es_generations: outcome.state.generation,
            es_stop: Some(outcome.stop),
            ppo_curve: anchor.ppo_curve.clone(),
            es_curve: outcome.state.history,
        }))
    }

    /// What an unfinished two-stage cell should resume from, if it already
    /// reached its ES stage.
    fn saved_es_state(&self, key: CellKey) -> Result<Option<(Checkpoint, Option<Checkpoint>)>> {
        let dir = key.dir(self.root);
        let status: Option<CellStatus> = read_json(&dir.join("status.json")).ok();
        if status.map(|s| s.stage) != Some(CellStage::Es) {
            return Ok(None);
        }
        let ckpts = dir.join("checkpoints");
        let anchor_path = ckpts.join("anchor.json");
        if !anchor_path.exists() {
            return Err(Error::Checkpoint { path: anchor_path, reason: "missing checkpoint file".into() });
        }
        let anchor = checkpoint::load(&anchor_path)?;
        let latest_path = ckpts.join("latest.json");
        let latest = if latest_path.exists() { Some(checkpoint::load(&latest_path)?) } else { None };
        Ok(Some((anchor, latest)))
    }
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| contract(format!("cannot start worker pool: {e}")))
}

/// Runs every unfinished cell of `plan` under `root`, then aggregates.
fn execute(plan: &ExperimentPlan, root: &Path, options: &SweepOptions) -> Result<SweepSummary> {
    let runner = Runner { plan, root, stop_hook: options.stop_hook.clone() };
    let mut done: BTreeMap<CellKey, RunRecord> = BTreeMap::new();
    let mut pending = Vec::new();
    for key in plan.cells() {
        let record_path = key.dir(root).join("record.json");
        match record_path.exists().then(|| read_json::<RunRecord>(&record_path)) {
            Some(Ok(r)) => {
                done.insert(key, r);
            }
            Some(Err(e)) => log::warn!("{key}: unreadable record ({e}); rerunning"),
            None => pending.push(key),
        }
    }

    // Classify unfinished two-stage cells.
    let mut from_saved = Vec::new();
    let mut from_anchor = Vec::new();
    let mut ppo_only = Vec::new();
    for key in pending {
        if key.method == Method::PpoOnly {
            ppo_only.push(key);
            continue;
        }
        match runner.saved_es_state(key) {
            Ok(Some(saved)) => from_saved.push((key, saved)),
            Ok(None) => from_anchor.push(key),
            Err(e) => {
                if let Some(r) = runner.finish(key, Err(e)) {
                    done.insert(key, r);
                }
            }
        }
    }
    let anchor_seeds: Vec<u64> = {
        let mut s: Vec<u64> = from_anchor.iter().map(|k| k.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };

    enum Phase1 {
        Anchor(u64, Result<Checkpoint>),
        Cell(CellKey, Option<RunRecord>),
    }
    let pool = pool(options.workers)?;
    let mut interrupted = Vec::new();
    let phase1: Vec<Phase1> = pool.install(|| {
        let jobs: Vec<Result<u64, CellKey>> =
            anchor_seeds.iter().map(|&s| Ok(s)).chain(ppo_only.iter().map(|&k| Err(k))).collect();
        jobs.into_par_iter()
            .map(|job| match job {
                Ok(seed) => Phase1::Anchor(seed, runner.anchor(seed)),
                Err(key) => Phase1::Cell(key, runner.finish(key, runner.run_ppo_only(key))),
            })
            .collect()
    });
    let mut anchors = BTreeMap::new();
    for item in phase1 {
        match item {
            Phase1::Anchor(seed, a) => {
                anchors.insert(seed, a);
            }
            Phase1::Cell(key, Some(r)) => {
                done.insert(key, r);
            }
            Phase1::Cell(key, None) => interrupted.push(key),
        }
    }

    let phase2: Vec<(CellKey, Option<RunRecord>)> = pool.install(|| {
        let fresh = from_anchor.into_par_iter().map(|key| {
            let result = match &anchors[&key.seed] {
                Ok(anchor) => runner.run_es(key, anchor, None),
                Err(e) => Err(Error::Contract(format!("PPO stage failed: {e}"))),
            };
            (key, runner.finish(key, result))
        });
        let saved = from_saved
            .into_par_iter()
            .map(|(key, (anchor, latest))| (key, runner.finish(key, runner.run_es(key, &anchor, latest))));
        fresh.chain(saved).collect()
    });
    for (key, r) in phase2 {
        match r {
            Some(r) => {
                done.insert(key, r);
            }
            None => interrupted.push(key),
        }
    }

    let records: Vec<RunRecord> = plan.cells().into_iter().filter_map(|k| done.remove(&k)).collect();
    let failures: Vec<FailureEntry> = records
        .iter()
        .filter(|r| !r.is_completed())
        .map(|r| FailureEntry { cell: r.key().to_string(), error: r.error.clone().unwrap_or_default() })
        .collect();
    write_json(&root.join("failures.json"), &failures)?;
    interrupted.sort();
    let report = aggregate_records(&records, plan.methods.first().map(|m| m.as_str()), &plan.bootstrap).ok();
    Ok(SweepSummary { records, interrupted, report })
}

/// Score matrix over completed records. Per method, only seeds completed on
/// every task are kept, so each method's rows stay rectangular.
pub fn score_matrix(records: &[RunRecord]) -> Result<ScoreMatrix> {
    let completed: Vec<&RunRecord> = records.iter().filter(|r| r.is_completed()).collect();
    let mut tasks: Vec<TaskId> = completed.iter().map(|r| r.task).collect();
    tasks.sort();
    tasks.dedup();
    let mut methods: Vec<Method> = completed.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut matrix = ScoreMatrix::new(tasks.iter().map(|t| t.as_str().to_owned()).collect());
    for method in methods {
        let by_cell: BTreeMap<(TaskId, u64), f64> = completed
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.final_success_rate.map(|s| ((r.task, r.seed), s)))
            .collect();
        let mut seeds: Vec<u64> = by_cell.keys().map(|(_, s)| *s).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds.retain(|s| tasks.iter().all(|t| by_cell.contains_key(&(*t, *s))));
        if seeds.is_empty() {
            continue;
        }
        let rows = tasks.iter().map(|t| seeds.iter().map(|s| by_cell[&(*t, *s)]).collect()).collect();
        matrix.insert(method.as_str(), rows)?;
    }
    Ok(matrix)
}

/// Aggregate statistics over the completed records; `baseline` defaults to
/// `ppo_only` when present.
pub fn aggregate_records(records: &[RunRecord], baseline: Option<&str>, config: &BootstrapConfig) -> Result<AggregateReport> {
    let matrix = score_matrix(records)?;
    let baseline = baseline.filter(|b| matrix.get(b).is_some()).or_else(|| {
        matrix.get(Method::PpoOnly.as_str()).map(|_| Method::PpoOnly.as_str())
    });
    aggregate(&matrix, baseline, config)
}

/// Starts a fresh sweep in `root`, which must be empty or absent.
pub fn sweep(plan: &ExperimentPlan, root: &Path, options: &SweepOptions) -> Result<SweepSummary> {
    plan.validate()?;
    if root.exists() && fs::read_dir(root).map_err(io_err(root))?.next().is_some() {
        return Err(contract(format!("{} is not empty", root.display())));
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    write_json(&root.join("plan.json"), plan)?;
    execute(plan, root, options)
}

/// Continues the sweep recorded in `root/plan.json`. Finished cells are left
/// untouched; a finished directory is a no-op.
pub fn resume(root: &Path, options: &SweepOptions) -> Result<SweepSummary> {
    let plan = ExperimentPlan::load(&root.join("plan.json"))?;
    execute(&plan, root, options)
}

/// Every `record.json` below `root/runs`, in key order.
pub fn load_records(root: &Path) -> Result<Vec<RunRecord>> {
    let runs = root.join("runs");
    let mut records = Vec::new();
    if !runs.is_dir() {
        return Ok(records);
    }
    for task in fs::read_dir(&runs).map_err(io_err(&runs))? {
        let task = task.map_err(io_err(&runs))?.path();
        if !task.is_dir() {
            continue;
        }
        for method in fs::read_dir(&task).map_err(io_err(&task))? {
            let method = method.map_err(io_err(&task))?.path();
            if !method.is_dir() {
                continue;
            }
            for cell in fs::read_dir(&method).map_err(io_err(&method))? {
                let path = cell.map_err(io_err(&method))?.path().join("record.json");
                if path.is_file() {
                    records.push(read_json::<RunRecord>(&path)?);
                }
            }
        }
    }
    records.sort_by_key(RunRecord::key);
    Ok(records)
}
