//! Post-training evaluation: behaviour scores, X-Y traces, interpolation
//! sweeps, and the exact check that the entropy bonus equals a KL penalty
//! against the uniform-policy trajectory distribution.
//!
//! Artifacts:
//! * `scores.csv` — `context_id,mean,std`, sorted by mean, descending.
//! * `traces.jsonl` — one JSON object per rollout:
//!   `{"context_id":c,"seed":s,"mode":"deterministic","xy_points":[[x,y],...]}`;
//!   interpolation traces add `"alpha"` and `"other_id"`.
//! * `klcheck.txt` — one `name lhs rhs diff` line per MDP fixture.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{enumerate_trajectories, EnumerableMdp, EnvConfig};
use crate::error::{Error, Result};
use crate::par::Executor;
use crate::params::ParamStore;
use crate::policy::{interpolate_contexts, ActionMode, ContextInput, Policy, Trajectory};
use crate::rng::{derive_seed, rng_from, TAG_EVAL};
use crate::trainer::parse_flat;

/// Rollouts per context when scoring behaviour.
pub const EVAL_ROLLOUTS: usize = 5;
pub const KL_TOLERANCE: f64 = 1e-10;

pub fn mode_name(mode: ActionMode) -> &'static str {
    match mode {
        ActionMode::Stochastic => "stochastic",
        ActionMode::Deterministic => "deterministic",
    }
}

/// Euclidean norm of the final `(x, y)`.
pub fn score_final_distance(traj: &Trajectory) -> f64 {
    let s = traj.states.last().expect("trajectory has at least one state");
    s[0].hypot(s[1])
}

/// Signed distance of the final state from the start state, for one-hot
/// chain observations.
pub fn score_final_offset(start_state: usize) -> impl Fn(&Trajectory) -> f64 + Sync {
    move |traj: &Trajectory| {
        let s = traj.states.last().expect("trajectory has at least one state");
        let idx = s.iter().position(|&v| v == 1.0).unwrap_or(start_state);
        idx as f64 - start_state as f64
    }
}

pub type ScoreFn = Box<dyn Fn(&Trajectory) -> f64 + Sync>;

/// The behaviour score used for an environment, with its name.
pub fn default_score(env: &EnvConfig) -> (&'static str, ScoreFn) {
    match env {
        EnvConfig::Point { .. } => ("final_distance", Box::new(score_final_distance)),
        EnvConfig::Chain(mdp) => ("final_offset", Box::new(score_final_offset(mdp.start_state))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorScore {
    pub context_id: usize,
    pub mean: f64,
    /// Population standard deviation over the rollouts.
    pub std: f64,
}

/// The evaluation seeds used by default: one per rollout, shared by all
/// contexts.
pub fn eval_seeds(base: u64) -> Vec<u64> {
    (0..EVAL_ROLLOUTS as u64)
        .map(|j| derive_seed(base, &[TAG_EVAL, j]))
        .collect()
}

/// Roll out every context in `0..k` once per seed; rows are
/// context-major.
#[allow(clippy::too_many_arguments)]
pub fn rollout_grid(
    policy: &Policy,
    store: &ParamStore,
    env: &EnvConfig,
    k: usize,
    seeds: &[u64],
    mode: ActionMode,
    exec: &Executor,
) -> Result<Vec<Trajectory>> {
    let contexts: Vec<usize> = (0..k).collect();
    let parts = exec.map(&contexts, |&c| {
        let ctx = vec![ContextInput::Id(c); seeds.len()];
        policy.rollout_batch(store, env, &ctx, seeds, k, mode)
    });
    let mut out = Vec::with_capacity(k * seeds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Score every context over exactly [`EVAL_ROLLOUTS`] rollouts; sorted by
/// mean, descending (stable, so ties keep context order).
#[allow(clippy::too_many_arguments)]
pub fn collect_scores(
    policy: &Policy,
    store: &ParamStore,
    env: &EnvConfig,
    k: usize,
    score_fn: &(dyn Fn(&Trajectory) -> f64 + Sync),
    seeds: &[u64],
    mode: ActionMode,
    exec: &Executor,
) -> Result<Vec<BehaviorScore>> {
    if seeds.len() != EVAL_ROLLOUTS {
        return Err(Error::Config(format!(
            "scores use exactly {EVAL_ROLLOUTS} rollouts, got {} seeds",
            seeds.len()
        )));
    }
    let trajs = rollout_grid(policy, store, env, k, seeds, mode, exec)?;
    let mut scores: Vec<BehaviorScore> = trajs
        .chunks(seeds.len())
        .enumerate()
        .map(|(c, group)| {
            let vals: Vec<f64> = group.iter().map(score_fn).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            // identical values have zero spread even when `mean` rounds
            let std = if vals.iter().all(|&v| v == vals[0]) {
                0.0
            } else {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
            };
            BehaviorScore {
                context_id: c,
                mean,
                std,
            }
        })
        .collect();
    scores.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    Ok(scores)
}

pub fn scores_csv(scores: &[BehaviorScore]) -> String {
    let mut s = String::from("context_id,mean,std\n");
    for r in scores {
        let _ = writeln!(s, "{},{},{}", r.context_id, r.mean, r.std);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub context_id: usize,
    pub seed: u64,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub other_id: Option<usize>,
    pub xy_points: Vec<[f64; 2]>,
}

impl TraceRecord {
    fn from_traj(traj: &Trajectory, seed: u64, mode: ActionMode) -> Self {
        TraceRecord {
            context_id: traj.context_id,
            seed,
            mode: mode_name(mode).into(),
            alpha: None,
            other_id: None,
            xy_points: traj.states.iter().map(|s| [s[0], s[1]]).collect(),
        }
    }
}

pub fn traces_jsonl(records: &[TraceRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_traces(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// One trace per `(context, seed)`, context-major, written to `out_path`.
#[allow(clippy::too_many_arguments)]
pub fn export_traces(
    policy: &Policy,
    store: &ParamStore,
    env: &EnvConfig,
    k: usize,
    seeds: &[u64],
    mode: ActionMode,
    out_path: &Path,
    exec: &Executor,
) -> Result<Vec<TraceRecord>> {
    let trajs = rollout_grid(policy, store, env, k, seeds, mode, exec)?;
    let records: Vec<TraceRecord> = trajs
        .iter()
        .enumerate()
        .map(|(i, t)| TraceRecord::from_traj(t, seeds[i % seeds.len()], mode))
        .collect();
    fs::write(out_path, traces_jsonl(&records)?)?;
    Ok(records)
}

/// Deterministic rollouts conditioned on `(1 - alpha) e_id1 + alpha e_id2`
/// for each alpha. Needs learned embeddings.
#[allow(clippy::too_many_arguments)]
pub fn interpolation_sweep(
    policy: &Policy,
    store: &ParamStore,
    env: &EnvConfig,
    k: usize,
    id1: usize,
    id2: usize,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    let Some(embedding) = policy.embedding() else {
        return Err(Error::Unsupported(
            "interpolation needs context embeddings, not one-hot".into(),
        ));
    };
    for id in [id1, id2] {
        if id >= k {
            return Err(Error::Context { id, k });
        }
    }
    let table = store.get(&embedding.table)?;
    let (e1, e2) = (table.row(id1), table.row(id2));
    let mut ctx = Vec::with_capacity(alphas.len());
    for &a in alphas {
        ctx.push(ContextInput::Vector {
            label: id1,
            values: interpolate_contexts(e1, e2, a)?,
        });
    }
    let seeds = vec![seed; alphas.len()];
    let trajs = policy.rollout_batch(store, env, &ctx, &seeds, k, ActionMode::Deterministic)?;
    Ok(trajs
        .iter()
        .zip(alphas)
        .map(|(t, &a)| TraceRecord {
            alpha: Some(a),
            other_id: Some(id2),
            ..TraceRecord::from_traj(t, seed, ActionMode::Deterministic)
        })
        .collect())
}

/// Largest pointwise distance between consecutive traces of a sweep.
pub fn max_adjacent_distance(traces: &[TraceRecord]) -> f64 {
    traces
        .windows(2)
        .flat_map(|w| {
            w[0].xy_points
                .iter()
                .zip(&w[1].xy_points)
                .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlCheck {
    /// Enumerated `KL(P(tau | pi) || P(tau | pi_0))`.
    pub lhs: f64,
    /// `-sum_t E[H(pi(.|s_t))] - E[sum_t log pi_0(a_t|s_t)]`.
    pub rhs: f64,
    pub diff: f64,
}

/// Compare both sides of the identity by exact enumeration, with `pi_0`
/// uniform over actions.
pub fn kl_identity_check(mdp: &EnumerableMdp, policy_probs: &[Vec<f64>]) -> Result<KlCheck> {
    let uniform = vec![vec![1.0 / mdp.n_actions as f64; mdp.n_actions]; mdp.n_states];
    let under_pi = enumerate_trajectories(mdp, policy_probs)?;
    let under_pi0 = enumerate_trajectories(mdp, &uniform)?;

    let mut lhs = 0.0;
    for (p, q) in under_pi.iter().zip(&under_pi0) {
        if p.probability > 0.0 {
            lhs += p.probability * (p.probability / q.probability).ln();
        }
    }

    let entropy: Vec<f64> = policy_probs
        .iter()
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .collect();
    let ln_pi0 = -(mdp.n_actions as f64).ln();
    let mut rhs = 0.0;
    for tr in &under_pi {
        let h: f64 = tr.states[..mdp.horizon].iter().map(|&s| entropy[s]).sum();
        rhs += tr.probability * (-h - mdp.horizon as f64 * ln_pi0);
    }
    Ok(KlCheck {
        lhs,
        rhs,
        diff: (lhs - rhs).abs(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlFixture {
    pub name: String,
    pub mdp: EnumerableMdp,
    pub policy: Vec<Vec<f64>>,
}

fn random_policy(n_states: usize, n_actions: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::RngExt;
    let mut rng = rng_from(seed, &[]);
    (0..n_states)
        .map(|_| {
            let w: Vec<f64> = (0..n_actions).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = w.iter().sum();
            let mut row: Vec<f64> = w.iter().map(|x| x / total).collect();
            // make the row sum to one exactly (up to the last entry's rounding)
            let head: f64 = row[..n_actions - 1].iter().sum();
            row[n_actions - 1] = 1.0 - head;
            row
        })
        .collect()
}

/// The built-in fixtures: three small MDPs (at most 3 states, 3 actions,
/// horizon 5) with stochastic, random and deterministic policies.
pub fn kl_fixtures() -> Vec<KlFixture> {
    vec![
        KlFixture {
            name: "line3_random".into(),
            mdp: EnumerableMdp::line(3, 4),
            policy: random_policy(3, 3, 17),
        },
        KlFixture {
            name: "cycle3_random".into(),
            mdp: EnumerableMdp::new(vec![vec![1, 0], vec![2, 0], vec![0, 2]], 0, 5).expect("valid fixture"),
            policy: random_policy(3, 2, 29),
        },
        KlFixture {
            name: "pair_deterministic".into(),
            mdp: EnumerableMdp::new(vec![vec![0, 1], vec![1, 0]], 0, 3).expect("valid fixture"),
            policy: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        },
    ]
}

/// Parse an MDP fixture from flat `key = value` text:
///
/// ```text
/// name = my_mdp            # optional
/// start_state = 0
/// horizon = 4
/// transition.0 = 1, 0      # successor of state 0 under each action
/// transition.1 = 1, 0
/// policy.0 = 0.25, 0.75    # pi(a | state 0)
/// policy.1 = 0.5, 0.5
/// ```
pub fn parse_mdp_fixture(text: &str) -> Result<KlFixture> {
    let map = parse_flat(text)?;
    let get = |k: &str| {
        map.get(k)
            .ok_or_else(|| Error::Config(format!("MDP file is missing `{k}`")))
    };
    let num = |k: &str, v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Config(format!("bad integer `{v}` for `{k}`")))
    };
    let start_state = num("start_state", get("start_state")?)?;
    let horizon = num("horizon", get("horizon")?)?;
    let mut transition = Vec::new();
    let mut policy = Vec::new();
    while let Some(row) = map.get(&format!("transition.{}", transition.len())) {
        let k = format!("transition.{}", transition.len());
        transition.push(row.split(',').map(|v| num(&k, v.trim())).collect::<Result<Vec<_>>>()?);
    }
    while let Some(row) = map.get(&format!("policy.{}", policy.len())) {
        let row: Result<Vec<f64>> = row
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad probability `{v}`")))
            })
            .collect();
        policy.push(row?);
    }
    let known = |k: &str| {
        matches!(k, "name" | "start_state" | "horizon")
            || k.strip_prefix("transition.")
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i < transition.len())
            || k.strip_prefix("policy.")
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i < policy.len())
    };
    if let Some(k) = map.keys().find(|k| !known(k)) {
        return Err(Error::Config(format!(
            "unexpected MDP key `{k}` (rows must be numbered from 0 without gaps)"
        )));
    }
    let mdp = EnumerableMdp::new(transition, start_state, horizon)?;
    if policy.len() != mdp.n_states {
        return Err(Error::Config(format!(
            "{} policy rows for {} states",
            policy.len(),
            mdp.n_states
        )));
    }
    Ok(KlFixture {
        name: map.get("name").cloned().unwrap_or_else(|| "custom".into()),
        mdp,
        policy,
    })
}

/// `name lhs rhs diff` lines.
pub fn klcheck_report(results: &[(String, KlCheck)]) -> String {
    let mut s = String::from("name lhs rhs diff\n");
    for (name, r) in results {
        let _ = writeln!(s, "{name} {:e} {:e} {:e}", r.lhs, r.rhs, r.diff);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ContextEncoding, PolicyConfig};
    use crate::rng::rng_from;

    fn traj_ending(x: f64, y: f64) -> Trajectory {
        Trajectory {
            context_id: 0,
            states: vec![vec![0.0; 4], vec![x, y, 0.0, 0.0]],
            actions: vec![vec![0.0, 0.0]],
            logps: vec![0.0],
            rewards: vec![0.0],
            entropies: vec![0.0],
        }
    }

    #[test]
    fn final_distance() {
        assert_eq!(score_final_distance(&traj_ending(0.0, 0.0)), 0.0);
        assert!((score_final_distance(&traj_ending(0.3, 0.4)) - 0.5).abs() < 1e-15);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let r = score_final_distance(&traj_ending(0.3 * c - 0.4 * s, 0.3 * s + 0.4 * c));
        assert!((r - 0.5).abs() < 1e-15);
    }

    fn point_policy(encoding: ContextEncoding, k: usize) -> (Policy, ParamStore, EnvConfig) {
        let env = EnvConfig::Point {
            horizon: 20,
            wall_penalty: 0.0,
        };
        let p = Policy::new(PolicyConfig::for_env(&env.spec(), encoding, k)).unwrap();
        let mut s = ParamStore::new();
        p.init(&mut s, &mut rng_from(4, &[]));
        (p, s, env)
    }

    #[test]
    fn scores_sorted_and_deterministic_std_zero() {
        let (p, s, env) = point_policy(ContextEncoding::Embedding { dim: 8 }, 4);
        let exec = Executor::sequential();
        let det = collect_scores(
            &p,
            &s,
            &env,
            4,
            &score_final_distance,
            &eval_seeds(0),
            ActionMode::Deterministic,
            &exec,
        )
        .unwrap();
        assert_eq!(det.len(), 4);
        assert!(det.iter().all(|r| r.std == 0.0));
        let sto = collect_scores(
            &p,
            &s,
            &env,
            4,
            &score_final_distance,
            &eval_seeds(0),
            ActionMode::Stochastic,
            &exec,
        )
        .unwrap();
        assert!(sto.windows(2).all(|w| w[0].mean >= w[1].mean));
        let one = collect_scores(
            &p,
            &s,
            &env,
            1,
            &score_final_distance,
            &eval_seeds(0),
            ActionMode::Stochastic,
            &exec,
        )
        .unwrap();
        assert_eq!(one.len(), 1);
        assert!(collect_scores(
            &p,
            &s,
            &env,
            4,
            &score_final_distance,
            &[1, 2],
            ActionMode::Stochastic,
            &exec
        )
        .is_err());
        assert!(scores_csv(&det).starts_with("context_id,mean,std\n"));
    }

    #[test]
    fn traces_export_is_reproducible() {
        let (p, s, env) = point_policy(ContextEncoding::OneHot, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.jsonl");
        let seeds = eval_seeds(1);
        let recs = export_traces(
            &p,
            &s,
            &env,
            3,
            &seeds,
            ActionMode::Stochastic,
            &path,
            &Executor::sequential(),
        )
        .unwrap();
        assert_eq!(recs.len(), 15);
        let first = fs::read(&path).unwrap();
        export_traces(
            &p,
            &s,
            &env,
            3,
            &seeds,
            ActionMode::Stochastic,
            &path,
            &Executor::with_workers(2),
        )
        .unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        let back = read_traces(&String::from_utf8(first).unwrap()).unwrap();
        assert_eq!(back, recs);
        assert!(back.iter().all(|r| r.xy_points.len() == 21));
        assert!(back
            .iter()
            .flat_map(|r| &r.xy_points)
            .all(|p| p[0].abs() <= 1.3 && p[1].abs() <= 1.3));
    }

    #[test]
    fn interpolation_endpoints_and_one_hot() {
        let (p, s, env) = point_policy(ContextEncoding::Embedding { dim: 8 }, 4);
        let alphas = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
        let sweep = interpolation_sweep(&p, &s, &env, 4, 1, 3, &alphas, 0).unwrap();
        assert_eq!(sweep.len(), 7);
        for (idx, id) in [(0, 1), (6, 3)] {
            let direct = p
                .rollout(&s, &env, &ContextInput::Id(id), 0, 4, ActionMode::Deterministic)
                .unwrap();
            assert_eq!(
                sweep[idx].xy_points,
                TraceRecord::from_traj(&direct, 0, ActionMode::Deterministic).xy_points
            );
        }
        assert!(max_adjacent_distance(&sweep).is_finite());
        let (p1, s1, env1) = point_policy(ContextEncoding::OneHot, 4);
        assert!(matches!(
            interpolation_sweep(&p1, &s1, &env1, 4, 0, 1, &alphas, 0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn kl_uniform_policy_is_zero() {
        let mdp = EnumerableMdp::line(3, 4);
        let r = kl_identity_check(&mdp, &vec![vec![1.0 / 3.0; 3]; 3]).unwrap();
        assert!(r.lhs.abs() < 1e-12 && r.rhs.abs() < 1e-12);
    }

    #[test]
    fn kl_deterministic_two_actions() {
        let mdp = EnumerableMdp::new(vec![vec![0, 1], vec![1, 0]], 0, 3).unwrap();
        let r = kl_identity_check(&mdp, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((r.lhs - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((r.rhs - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_fixtures_hold() {
        for f in kl_fixtures() {
            assert!(f.mdp.n_states <= 3 && f.mdp.n_actions <= 3 && f.mdp.horizon <= 5);
            let r = kl_identity_check(&f.mdp, &f.policy).unwrap();
            assert!(r.diff < KL_TOLERANCE, "{}: {r:?}", f.name);
        }
        let mut rng_policy = random_policy(3, 2, 5);
        rng_policy.truncate(3);
        let mdp = EnumerableMdp::new(vec![vec![1, 2], vec![0, 2], vec![1, 1]], 0, 4).unwrap();
        assert!(kl_identity_check(&mdp, &rng_policy).unwrap().diff < KL_TOLERANCE);
    }

    #[test]
    fn enumeration_cap_is_reported() {
        let mdp = EnumerableMdp::line(3, 20);
        assert!(matches!(
            kl_identity_check(&mdp, &vec![vec![1.0 / 3.0; 3]; 3]),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn mdp_file_round_trip() {
        let text = "name = tiny\nstart_state = 0\nhorizon = 3\ntransition.0 = 1, 0\ntransition.1 = 1, 0\npolicy.0 = 0.25, 0.75\npolicy.1 = 0.5, 0.5\n";
        let f = parse_mdp_fixture(text).unwrap();
        assert_eq!(f.name, "tiny");
        assert_eq!(f.mdp.transition, vec![vec![1, 0], vec![1, 0]]);
        assert!(kl_identity_check(&f.mdp, &f.policy).unwrap().diff < KL_TOLERANCE);
        assert!(parse_mdp_fixture("start_state = 0\nhorizon = 3\ntransition.0 = 0\npolicy.1 = 1").is_err());
        assert!(parse_mdp_fixture("horizon = 3").is_err());
    }
}
