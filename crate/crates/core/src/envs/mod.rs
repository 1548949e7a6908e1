//! Self-contained environments.

mod chain;
mod point;

pub use chain::{enumerate_trajectories, ChainEnv, EnumerableMdp, EnumeratedTrajectory, ENUMERATION_CAP};
pub use point::{PointEnv, RewardHook, POINT_BOUND, POINT_HORIZON};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum ActionKind {
    Continuous { dim: usize, low: f64, high: f64 },
    Discrete { count: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action: ActionKind,
    pub horizon: usize,
}

impl EnvSpec {
    /// Width of an action as stored in trajectories (discrete actions are a
    /// single index).
    pub fn action_width(&self) -> usize {
        match self.action {
            ActionKind::Continuous { dim, .. } => dim,
            ActionKind::Discrete { .. } => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_obs: Vec<f64>,
    /// Extrinsic reward; zero in reward-free environments.
    pub reward: f64,
    pub done: bool,
}

pub trait Env {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

/// Environment selected by name from a run configuration.
#[derive(Clone, Debug)]
pub enum EnvConfig {
    Point { horizon: usize, wall_penalty: f64 },
    Chain(EnumerableMdp),
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Point { .. } => "point2d",
            EnvConfig::Chain(_) => "chain",
        }
    }

    pub fn build(&self) -> AnyEnv {
        match self {
            EnvConfig::Point { horizon, wall_penalty } => {
                let mut env = PointEnv::with_horizon(*horizon);
                if *wall_penalty != 0.0 {
                    env = env.with_wall_penalty(*wall_penalty);
                }
                AnyEnv::Point(env)
            }
            EnvConfig::Chain(mdp) => AnyEnv::Chain(ChainEnv::new(mdp.clone())),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        self.build().spec()
    }
}

pub enum AnyEnv {
    Point(PointEnv),
    Chain(ChainEnv),
}

impl Env for AnyEnv {
    fn spec(&self) -> EnvSpec {
        match self {
            AnyEnv::Point(e) => e.spec(),
            AnyEnv::Chain(e) => e.spec(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            AnyEnv::Point(e) => e.reset(seed),
            AnyEnv::Chain(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        match self {
            AnyEnv::Point(e) => e.step(action),
            AnyEnv::Chain(e) => e.step(action),
        }
    }
}
