//! Damped double-integrator point agent on the plane.
//!
//! Observation is `(x, y, vx, vy)`. Each step:
//! `v <- 0.9 v + 0.05 a`, `p <- clamp(p + v, ±1.3)`, and velocity is zeroed
//! on any axis that hit the wall. Actions are clipped to `[-1, 1]`.

use std::sync::Arc;

use super::{ActionKind, Env, EnvSpec, StepResult};
use crate::error::{Error, Result};

pub const POINT_BOUND: f64 = 1.3;
pub const POINT_HORIZON: usize = 65;
const DAMPING: f64 = 0.9;
const GAIN: f64 = 0.05;

/// Extrinsic reward as a function of `(obs, clipped action, next_obs)`.
pub type RewardHook = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct PointEnv {
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
    horizon: usize,
    reward_hook: Option<RewardHook>,
    wall_penalty: f64,
}

impl std::fmt::Debug for PointEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PointEnv")
            .field("pos", &self.pos)
            .field("vel", &self.vel)
            .field("t", &self.t)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl Default for PointEnv {
    fn default() -> Self {
        PointEnv::with_horizon(POINT_HORIZON)
    }
}

impl PointEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_horizon(horizon: usize) -> Self {
        PointEnv {
            pos: [0.0; 2],
            vel: [0.0; 2],
            t: 0,
            horizon,
            reward_hook: None,
            wall_penalty: 0.0,
        }
    }

    pub fn with_reward_hook(mut self, hook: RewardHook) -> Self {
        self.reward_hook = Some(hook);
        self
    }

    /// Subtract `penalty` from the reward on every step that touches a wall.
    pub fn with_wall_penalty(mut self, penalty: f64) -> Self {
        self.wall_penalty = penalty;
        self
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Env for PointEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 4,
            action: ActionKind::Continuous {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
            horizon: self.horizon,
        }
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = [0.0; 2];
        self.vel = [0.0; 2];
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.t >= self.horizon {
            return Err(Error::EpisodeComplete(self.t));
        }
        if action.len() != 2 {
            return Err(Error::dim(
                "point2d action",
                format!("width {}, expected 2", action.len()),
            ));
        }
        let before = self.obs();
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let mut hit_wall = false;
        for k in 0..2 {
            self.vel[k] = DAMPING * self.vel[k] + GAIN * a[k];
            let p = self.pos[k] + self.vel[k];
            let clamped = p.clamp(-POINT_BOUND, POINT_BOUND);
            if clamped != p {
                self.vel[k] = 0.0;
                hit_wall = true;
            }
            self.pos[k] = clamped;
        }
        self.t += 1;
        let next_obs = self.obs();
        let mut reward = 0.0;
        if let Some(hook) = &self.reward_hook {
            reward += hook(&before, &a, &next_obs);
        }
        if hit_wall {
            reward -= self.wall_penalty;
        }
        Ok(StepResult {
            next_obs,
            reward,
            done: self.t == self.horizon,
        })
    }
}
