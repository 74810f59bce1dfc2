use super::{check_action, check_active, clip_unit, Env, MdpSpec, Step};
use crate::error::Result;
use crate::policy::uniform;
use crate::rng::{stream, Domain};

const DT: f64 = 0.02;
const MAX_DEPTH: f64 = 1.5;
const TOLERANCE: f64 = 0.002;
const OVERSHOOT_PENALTY: f64 = 2.0;
/// Multiplier on the depth error in the third observation channel.
pub const ERROR_GAIN: f64 = 10.0;

/// One-dimensional insertion: drive a peg to a target depth with a tight
/// success band.
///
/// Observation `(depth, target, ERROR_GAIN * (target - depth))`, action a depth
/// velocity clipped to `[-1, 1]` (at most 0.02 per step). Reward is
/// `-|depth - target|`, with an extra `2 * (depth - target)` charged when the
/// peg is pushed past the target. Success when `|depth - target| < 0.002`,
/// ten times tighter than one full-speed step.
#[derive(Debug, Clone)]
pub struct PegInsert1d {
    spec: MdpSpec,
    depth: f64,
    target: f64,
    steps: usize,
    success: bool,
}

impl PegInsert1d {
    pub fn new() -> Self {
        let spec = MdpSpec::new("peg-insert-1d", 3, 1, 200, 0.99).with_success(
            (1.0 + OVERSHOOT_PENALTY) * MAX_DEPTH,
            "|depth - target| < 0.002",
        );
        Self { spec, depth: 0.0, target: 0.0, steps: 0, success: false }
    }

    pub fn tolerance() -> f64 {
        TOLERANCE
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.depth, self.target, ERROR_GAIN * (self.target - self.depth)]
    }
}

impl Default for PegInsert1d {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PegInsert1d {
    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Domain::EnvReset, 0, 0);
        self.depth = uniform(&mut rng, 0.0, 0.2);
        self.target = uniform(&mut rng, 0.6, 1.0);
        self.steps = 0;
        self.success = false;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        check_action(&self.spec, action)?;
        check_active(&self.spec, self.steps)?;
        self.depth = (self.depth + DT * clip_unit(action[0])).clamp(0.0, MAX_DEPTH);
        self.steps += 1;
        let err = self.depth - self.target;
        self.success |= err.abs() < TOLERANCE;
        let reward = -err.abs() - OVERSHOOT_PENALTY * err.max(0.0);
        Ok(Step { observation: self.observation(), reward, terminated: false, success: self.success })
    }

    fn expert_action(&self, obs: &[f64]) -> Option<Vec<f64>> {
        Some(vec![(0.5 / DT * (obs[1] - obs[0])).clamp(-1.0, 1.0)])
    }
}
