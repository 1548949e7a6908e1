//! Small deterministic MDPs whose trajectory space can be enumerated.

use super::{ActionKind, Env, EnvSpec, StepResult};
use crate::error::{Error, Result};

pub const ENUMERATION_CAP: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct EnumerableMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a]` is the successor of `s` under `a`.
    pub transition: Vec<Vec<usize>>,
    pub start_state: usize,
    pub horizon: usize,
}

impl EnumerableMdp {
    pub fn new(transition: Vec<Vec<usize>>, start_state: usize, horizon: usize) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        let mdp = EnumerableMdp {
            n_states,
            n_actions,
            transition,
            start_state,
            horizon,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// A line of `n` states; actions move left, stay, or move right
    /// (saturating at the ends). Starts in the middle.
    pub fn line(n: usize, horizon: usize) -> Self {
        let transition = (0..n)
            .map(|s| vec![s.saturating_sub(1), s, (s + 1).min(n - 1)])
            .collect();
        EnumerableMdp {
            n_states: n,
            n_actions: 3,
            transition,
            start_state: n / 2,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::Config("MDP needs at least one state and one action".into()));
        }
        if self.start_state >= self.n_states {
            return Err(Error::Config(format!("start state {} out of range", self.start_state)));
        }
        if self.transition.len() != self.n_states {
            return Err(Error::Config("transition table row count != n_states".into()));
        }
        for (s, row) in self.transition.iter().enumerate() {
            if row.len() != self.n_actions {
                return Err(Error::Config(format!("transition row {s} has {} actions", row.len())));
            }
            if let Some(&bad) = row.iter().find(|&&n| n >= self.n_states) {
                return Err(Error::Config(format!("transition {s} -> {bad} is not a valid state")));
            }
        }
        Ok(())
    }

    pub fn trajectory_count(&self) -> u128 {
        (self.n_actions as u128).saturating_pow(self.horizon as u32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedTrajectory {
    /// `horizon + 1` visited states.
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub probability: f64,
}

/// Every action sequence of length `horizon` with its exact probability
/// under the Markov policy `policy_probs[state][action]`.
pub fn enumerate_trajectories(mdp: &EnumerableMdp, policy_probs: &[Vec<f64>]) -> Result<Vec<EnumeratedTrajectory>> {
    mdp.validate()?;
    if policy_probs.len() != mdp.n_states {
        return Err(Error::dim(
            "policy table",
            format!("{} rows for {} states", policy_probs.len(), mdp.n_states),
        ));
    }
    for (s, row) in policy_probs.iter().enumerate() {
        if row.len() != mdp.n_actions {
            return Err(Error::dim("policy table", format!("row {s} has {} entries", row.len())));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!(
                "policy row {s} is not a distribution (sum {total})"
            )));
        }
    }
    let count = mdp.trajectory_count();
    if count > ENUMERATION_CAP as u128 {
        return Err(Error::Capacity {
            count,
            cap: ENUMERATION_CAP,
        });
    }

    let mut out = Vec::with_capacity(count as usize);
    let mut actions = vec![0usize; mdp.horizon];
    for code in 0..count as usize {
        // little-endian digits in base n_actions
        let mut rest = code;
        for a in actions.iter_mut() {
            *a = rest % mdp.n_actions;
            rest /= mdp.n_actions;
        }
        let mut states = Vec::with_capacity(mdp.horizon + 1);
        let mut s = mdp.start_state;
        states.push(s);
        let mut p = 1.0;
        for &a in &actions {
            p *= policy_probs[s][a];
            s = mdp.transition[s][a];
            states.push(s);
        }
        out.push(EnumeratedTrajectory {
            states,
            actions: actions.clone(),
            probability: p,
        });
    }
    Ok(out)
}

/// An [`EnumerableMdp`] as an environment with one-hot observations.
#[derive(Clone, Debug)]
pub struct ChainEnv {
    mdp: EnumerableMdp,
    state: usize,
    t: usize,
}

impl ChainEnv {
    pub fn new(mdp: EnumerableMdp) -> Self {
        let state = mdp.start_state;
        ChainEnv { mdp, state, t: 0 }
    }

    fn obs(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.mdp.n_states];
        o[self.state] = 1.0;
        o
    }
}

impl Env for ChainEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: self.mdp.n_states,
            action: ActionKind::Discrete {
                count: self.mdp.n_actions,
            },
            horizon: self.mdp.horizon,
        }
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.state = self.mdp.start_state;
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.t >= self.mdp.horizon {
            return Err(Error::EpisodeComplete(self.t));
        }
        let a = action.first().copied().unwrap_or(f64::NAN);
        if !(a >= 0.0 && (a as usize) < self.mdp.n_actions && a.fract() == 0.0) {
            return Err(Error::Index {
                what: "chain action".into(),
                index: a.max(0.0) as usize,
                len: self.mdp.n_actions,
            });
        }
        self.state = self.mdp.transition[self.state][a as usize];
        self.t += 1;
        Ok(StepResult {
            next_obs: self.obs(),
            reward: 0.0,
            done: self.t == self.mdp.horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(ts: &[EnumeratedTrajectory]) -> f64 {
        ts.iter().map(|t| t.probability).sum()
    }

    #[test]
    fn single_action_single_trajectory() {
        let mdp = EnumerableMdp::new(vec![vec![0], vec![0]], 1, 7).unwrap();
        let ts = enumerate_trajectories(&mdp, &[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].probability, 1.0);
    }

    #[test]
    fn uniform_two_actions_horizon_three() {
        let mdp = EnumerableMdp::new(vec![vec![0, 1], vec![1, 0]], 0, 3).unwrap();
        let ts = enumerate_trajectories(&mdp, &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(ts.len(), 8);
        assert!(ts.iter().all(|t| t.probability == 0.125));
    }

    #[test]
    fn biased_policy_horizon_two() {
        let mdp = EnumerableMdp::new(vec![vec![0, 0]], 0, 2).unwrap();
        let ts = enumerate_trajectories(&mdp, &[vec![0.7, 0.3]]).unwrap();
        let mut ps: Vec<f64> = ts.iter().map(|t| t.probability).collect();
        ps.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected = [0.49, 0.21, 0.21, 0.09];
        for (p, e) in ps.iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        assert!((total(&ts) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn capacity_error() {
        let mdp = EnumerableMdp::line(3, 13); // 3^13 > 1e6
        let probs = vec![vec![1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0]; 3];
        assert!(matches!(
            enumerate_trajectories(&mdp, &probs),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(EnumerableMdp::new(vec![vec![0, 2], vec![1, 0]], 0, 2).is_err());
        let mdp = EnumerableMdp::line(3, 2);
        assert!(enumerate_trajectories(&mdp, &vec![vec![0.5, 0.5, 0.5]; 3]).is_err());
    }

    #[test]
    fn chain_env_walks_the_table() {
        let mut env = ChainEnv::new(EnumerableMdp::line(5, 3));
        assert_eq!(env.reset(0), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(env.step(&[2.0]).unwrap().next_obs, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(env.step(&[2.0]).unwrap().next_obs, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let last = env.step(&[2.0]).unwrap();
        assert!(last.done);
        assert_eq!(last.next_obs[4], 1.0);
        assert!(env.step(&[0.0]).is_err());
        assert!(ChainEnv::new(EnumerableMdp::line(5, 3)).step(&[3.0]).is_err());
    }
}
