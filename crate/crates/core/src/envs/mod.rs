//! Episodic control tasks.
//!
//! Three goal-conditioned toy tasks graded by required precision:
//!
//! | id              | tolerance | horizon | observation                          |
//! |-----------------|-----------|---------|--------------------------------------|
//! | `point-reach`   | 0.04      | 100     | position, goal                       |
//! | `arm-reach`     | 0.04      | 100     | joint cos/sin, end effector, goal    |
//! | `peg-insert-1d` | 0.002     | 200     | depth, target depth, scaled error    |
//!
//! All tasks use γ = 0.99, latch `success` once achieved, and never terminate
//! before the horizon.

mod arm_reach;
mod peg_insert;
mod point_reach;

use serde::{Deserialize, Serialize};

pub use arm_reach::ArmReach;
pub use peg_insert::PegInsert1d;
pub use point_reach::PointReach;

use crate::error::{Error, Result};

/// Static description of an episodic MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub gamma: f64,
    /// Upper bound on `|r_t|`.
    pub reward_bound: f64,
    pub success: String,
}

impl MdpSpec {
    pub fn new(id: &str, state_dim: usize, action_dim: usize, horizon: usize, gamma: f64) -> Self {
        assert!(horizon >= 1, "horizon must be >= 1");
        Self {
            id: id.to_owned(),
            state_dim,
            action_dim,
            horizon,
            gamma,
            reward_bound: f64::INFINITY,
            success: String::new(),
        }
    }

    fn with_success(mut self, bound: f64, success: &str) -> Self {
        self.reward_bound = bound;
        self.success = success.to_owned();
        self
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Episode ended for a task reason (not the horizon).
    pub terminated: bool,
    /// Latched: true from the first successful step to the end of the episode.
    pub success: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &MdpSpec;

    /// Starts a new episode; the initial state is a pure function of `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    fn step(&mut self, action: &[f64]) -> Result<Step>;

    /// Hand-written controller that solves the task from the observation.
    fn expert_action(&self, _observation: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Builds independent environment instances, one per rollout.
pub trait EnvFactory: Sync {
    fn make(&self) -> Box<dyn Env>;
}

impl<F> EnvFactory for F
where
    F: Fn() -> Box<dyn Env> + Sync,
{
    fn make(&self) -> Box<dyn Env> {
        self()
    }
}

/// The registered tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "point-reach")]
    PointReach,
    #[serde(rename = "arm-reach")]
    ArmReach,
    #[serde(rename = "peg-insert-1d")]
    PegInsert1d,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::PointReach, TaskId::ArmReach, TaskId::PegInsert1d];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::PointReach => "point-reach",
            TaskId::ArmReach => "arm-reach",
            TaskId::PegInsert1d => "peg-insert-1d",
        }
    }

    pub fn make(self) -> Box<dyn Env> {
        match self {
            TaskId::PointReach => Box::new(PointReach::new()),
            TaskId::ArmReach => Box::new(ArmReach::new()),
            TaskId::PegInsert1d => Box::new(PegInsert1d::new()),
        }
    }

    pub fn spec(self) -> MdpSpec {
        self.make().spec().clone()
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownEnv(s.to_owned()))
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl EnvFactory for TaskId {
    fn make(&self) -> Box<dyn Env> {
        TaskId::make(*self)
    }
}

/// Looks an environment up by its string id.
pub fn make_env(id: &str) -> Result<Box<dyn Env>> {
    Ok(id.parse::<TaskId>()?.make())
}

/// Every task spec as pretty JSON, for documentation.
pub fn registry_json() -> String {
    let specs: Vec<MdpSpec> = TaskId::ALL.iter().map(|t| t.spec()).collect();
    serde_json::to_string_pretty(&specs).expect("specs serialize")
}

pub(crate) fn check_action(spec: &MdpSpec, action: &[f64]) -> Result<()> {
    if action.len() != spec.action_dim {
        return Err(Error::Contract(format!(
            "{} expects {} action dims, got {}",
            spec.id,
            spec.action_dim,
            action.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_active(spec: &MdpSpec, steps: usize) -> Result<()> {
    if steps >= spec.horizon {
        return Err(Error::Contract(format!("{}: step called after the horizon", spec.id)));
    }
    Ok(())
}

pub(crate) fn clip_unit(a: f64) -> f64 {
    // NaN actions become 0 so the state stays finite.
    if a.is_nan() {
        0.0
    } else {
        a.clamp(-1.0, 1.0)
    }
}
