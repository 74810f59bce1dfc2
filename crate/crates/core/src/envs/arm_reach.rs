use super::{check_action, check_active, clip_unit, Env, MdpSpec, Step};
use crate::error::Result;
use crate::policy::uniform;
use crate::rng::{stream, Domain};

const DT: f64 = 0.05;
const L1: f64 = 0.5;
const L2: f64 = 0.5;
const TOLERANCE: f64 = 0.04;

/// Two-link planar arm with joint-velocity control.
///
/// Observation `(cos q1, sin q1, cos q2, sin q2, ee_x, ee_y, goal_x, goal_y)`,
/// action joint velocities clipped to `[-1, 1]` rad/s with a 0.05 s step.
/// Goals are drawn as the end effector of a random elbow-bent configuration,
/// so every goal is reachable. Reward is the negative end-effector distance.
#[derive(Debug, Clone)]
pub struct ArmReach {
    spec: MdpSpec,
    q: [f64; 2],
    goal: [f64; 2],
    steps: usize,
    success: bool,
}

pub(crate) fn forward_kinematics(q: [f64; 2]) -> [f64; 2] {
    let (s1, c1) = q[0].sin_cos();
    let (s12, c12) = (q[0] + q[1]).sin_cos();
    [L1 * c1 + L2 * c12, L1 * s1 + L2 * s12]
}

impl ArmReach {
    pub fn new() -> Self {
        let spec = MdpSpec::new("arm-reach", 8, 2, 100, 0.99)
            .with_success(2.0, "end-effector distance to goal < 0.04");
        Self { spec, q: [0.0; 2], goal: [0.0; 2], steps: 0, success: false }
    }

    fn observation(&self) -> Vec<f64> {
        let ee = forward_kinematics(self.q);
        let (s1, c1) = self.q[0].sin_cos();
        let (s2, c2) = self.q[1].sin_cos();
        vec![c1, s1, c2, s2, ee[0], ee[1], self.goal[0], self.goal[1]]
    }

    fn distance(&self) -> f64 {
        let ee = forward_kinematics(self.q);
        (ee[0] - self.goal[0]).hypot(ee[1] - self.goal[1])
    }
}

impl Default for ArmReach {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for ArmReach {
    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        use std::f64::consts::PI;
        let mut rng = stream(seed, Domain::EnvReset, 0, 0);
        self.q = [uniform(&mut rng, -PI, PI), uniform(&mut rng, -2.5, 2.5)];
        let elbow = uniform(&mut rng, 0.3, 2.5);
        let sign = if uniform(&mut rng, 0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
        self.goal = forward_kinematics([uniform(&mut rng, -PI, PI), sign * elbow]);
        self.steps = 0;
        self.success = false;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        check_action(&self.spec, action)?;
        check_active(&self.spec, self.steps)?;
        for (q, a) in self.q.iter_mut().zip(action) {
            *q += DT * clip_unit(*a);
        }
        self.steps += 1;
        let dist = self.distance();
        self.success |= dist < TOLERANCE;
        Ok(Step { observation: self.observation(), reward: -dist, terminated: false, success: self.success })
    }

    /// Damped least-squares inverse kinematics on the Cartesian error.
    fn expert_action(&self, obs: &[f64]) -> Option<Vec<f64>> {
        let q1 = obs[1].atan2(obs[0]);
        let q2 = obs[3].atan2(obs[2]);
        let e = [obs[6] - obs[4], obs[7] - obs[5]];
        let (s1, c1) = q1.sin_cos();
        let (s12, c12) = (q1 + q2).sin_cos();
        let j = [[-L1 * s1 - L2 * s12, -L2 * s12], [L1 * c1 + L2 * c12, L2 * c12]];
        let damping = 0.05_f64.powi(2);
        // A = J J^T + damping I
        let a00 = j[0][0] * j[0][0] + j[0][1] * j[0][1] + damping;
        let a01 = j[0][0] * j[1][0] + j[0][1] * j[1][1];
        let a11 = j[1][0] * j[1][0] + j[1][1] * j[1][1] + damping;
        let det = a00 * a11 - a01 * a01;
        let y = [(a11 * e[0] - a01 * e[1]) / det, (a00 * e[1] - a01 * e[0]) / det];
        let dq = [j[0][0] * y[0] + j[1][0] * y[1], j[0][1] * y[0] + j[1][1] * y[1]];
        let gain = 0.5 / DT;
        let mut a = [gain * dq[0], gain * dq[1]];
        let peak = a[0].abs().max(a[1].abs());
        if peak > 1.0 {
            a = [a[0] / peak, a[1] / peak];
        }
        Some(a.to_vec())
    }
}
