use super::{check_action, check_active, clip_unit, Env, MdpSpec, Step};
use crate::error::Result;
use crate::policy::uniform;
use crate::rng::{stream, Domain};

const DT: f64 = 0.05;
const ARENA: f64 = 1.5;
const TOLERANCE: f64 = 0.04;

/// A point mass in the plane driven by clipped velocity commands toward a
/// random goal in `[-1, 1]^2`.
///
/// Observation `(x, y, goal_x, goal_y)`, action `(vx, vy)` clipped to
/// `[-1, 1]`, position clamped to `[-1.5, 1.5]^2`. Reward is the negative
/// distance to the goal after the move.
#[derive(Debug, Clone)]
pub struct PointReach {
    spec: MdpSpec,
    pos: [f64; 2],
    goal: [f64; 2],
    steps: usize,
    success: bool,
}

impl PointReach {
    pub fn new() -> Self {
        let spec = MdpSpec::new("point-reach", 4, 2, 100, 0.99).with_success(
            2.5 * std::f64::consts::SQRT_2,
            "distance from point to goal < 0.04",
        );
        Self { spec, pos: [0.0; 2], goal: [0.0; 2], steps: 0, success: false }
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.goal[0], self.goal[1]]
    }

    fn distance(&self) -> f64 {
        (self.pos[0] - self.goal[0]).hypot(self.pos[1] - self.goal[1])
    }
}

impl Default for PointReach {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointReach {
    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Domain::EnvReset, 0, 0);
        self.pos = [uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0)];
        self.goal = [uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0)];
        self.steps = 0;
        self.success = false;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        check_action(&self.spec, action)?;
        check_active(&self.spec, self.steps)?;
        for (p, a) in self.pos.iter_mut().zip(action) {
            *p = (*p + DT * clip_unit(*a)).clamp(-ARENA, ARENA);
        }
        self.steps += 1;
        let dist = self.distance();
        self.success |= dist < TOLERANCE;
        Ok(Step { observation: self.observation(), reward: -dist, terminated: false, success: self.success })
    }

    fn expert_action(&self, obs: &[f64]) -> Option<Vec<f64>> {
        let gain = 0.5 / DT;
        Some(vec![(gain * (obs[2] - obs[0])).clamp(-1.0, 1.0), (gain * (obs[3] - obs[1])).clamp(-1.0, 1.0)])
    }
}
