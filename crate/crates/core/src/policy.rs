//! Context-conditioned recurrent policy and the state-value baseline.
//!
//! The policy input at each step is `concat(obs, encode(c))`, fed through
//! LSTM -> MLP(tanh) -> linear head. The head parameterizes either a
//! diagonal Gaussian with a learned state-independent `log_std`, or a
//! categorical distribution over discrete actions.
//!
//! Rollouts run every episode of a batch in lockstep. Each episode draws its
//! noise from its own seeded generator and every matrix row is computed
//! independently, so an episode's trajectory does not depend on which other
//! episodes share its batch.

use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{ActionKind, Env, EnvConfig, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, Embedding, Linear, Lstm, LstmState, Mlp};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextEncoding {
    /// One-hot over all `max_contexts` ids.
    OneHot,
    /// Learned table with `dim` columns.
    Embedding { dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Gaussian { dim: usize },
    Categorical { count: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub head: HeadKind,
    pub encoding: ContextEncoding,
    /// Rows of the one-hot / embedding table (`K_max`).
    pub max_contexts: usize,
    pub lstm_size: usize,
    pub mlp_size: usize,
    pub init_log_std: f64,
}

impl PolicyConfig {
    /// Architecture defaults (LSTM 64, MLP 32) for an environment.
    pub fn for_env(spec: &EnvSpec, encoding: ContextEncoding, max_contexts: usize) -> Self {
        let head = match spec.action {
            ActionKind::Continuous { dim, .. } => HeadKind::Gaussian { dim },
            ActionKind::Discrete { count } => HeadKind::Categorical { count },
        };
        PolicyConfig {
            obs_dim: spec.obs_dim,
            head,
            encoding,
            max_contexts,
            lstm_size: 64,
            mlp_size: 32,
            init_log_std: 0.0,
        }
    }
}

/// How a context reaches the network: by id, or as an explicit encoding
/// vector (e.g. an interpolation between two embeddings). `label` is only
/// recorded in the resulting trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextInput {
    Id(usize),
    Vector { label: usize, values: Vec<f64> },
}

impl ContextInput {
    pub fn label(&self) -> usize {
        match self {
            ContextInput::Id(i) => *i,
            ContextInput::Vector { label, .. } => *label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    /// Gaussian mean / categorical argmax.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub context_id: usize,
    /// `T + 1` observations.
    pub states: Vec<Vec<f64>>,
    /// `T` actions as sampled (before environment clipping).
    pub actions: Vec<Vec<f64>>,
    pub logps: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Per-step policy entropy `H(pi(.|s_t, c))`.
    pub entropies: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Distribution produced by one policy step, still on the tape.
#[derive(Clone, Copy, Debug)]
pub enum ActionDist {
    Gaussian { mean: Var, log_std: Var },
    Categorical { log_probs: Var },
}

impl ActionDist {
    /// Log-probability of constant `actions` rows, shape `batch x 1`.
    pub fn log_prob(&self, tape: &mut Tape, actions: Tensor) -> Result<Var> {
        match *self {
            ActionDist::Gaussian { mean, log_std } => tape.gaussian_logprob(mean, log_std, actions),
            ActionDist::Categorical { log_probs } => {
                let idx = actions.data().iter().map(|a| *a as usize).collect::<Vec<_>>();
                tape.pick_cols(log_probs, &idx)
            }
        }
    }

    /// Closed-form entropy per row, shape `batch x 1`.
    pub fn entropy(&self, tape: &mut Tape) -> Result<Var> {
        match *self {
            ActionDist::Gaussian { mean, log_std } => {
                let batch = tape.value(mean).rows();
                let d = tape.value(mean).cols();
                let s = tape.sum_cols(log_std);
                let s = tape.add_scalar(s, d as f64 * HALF_LN_2PI_E);
                let ones = tape.constant(Tensor::filled(&[batch, 1], 1.0));
                tape.matmul(ones, s)
            }
            ActionDist::Categorical { log_probs } => {
                let p = tape.exp(log_probs);
                let plogp = tape.mul(p, log_probs)?;
                let s = tape.sum_cols(plogp);
                Ok(tape.neg(s))
            }
        }
    }

    fn batch(&self, tape: &Tape) -> usize {
        match *self {
            ActionDist::Gaussian { mean, .. } => tape.value(mean).rows(),
            ActionDist::Categorical { log_probs } => tape.value(log_probs).rows(),
        }
    }

    /// Draw one action for row `row`.
    fn sample(&self, tape: &Tape, row: usize, mode: ActionMode, rng: &mut Rng) -> Vec<f64> {
        match *self {
            ActionDist::Gaussian { mean, log_std } => {
                let m = tape.value(mean).row(row);
                let ls = tape.value(log_std).row(0);
                match mode {
                    ActionMode::Deterministic => m.to_vec(),
                    ActionMode::Stochastic => m
                        .iter()
                        .zip(ls)
                        .map(|(mu, l)| {
                            let eps: f64 = StandardNormal.sample(rng);
                            mu + l.exp() * eps
                        })
                        .collect(),
                }
            }
            ActionDist::Categorical { log_probs } => {
                let lp = tape.value(log_probs).row(row);
                let pick = match mode {
                    ActionMode::Deterministic => argmax(lp),
                    ActionMode::Stochastic => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut choice = lp.len() - 1;
                        for (i, l) in lp.iter().enumerate() {
                            acc += l.exp();
                            if u < acc {
                                choice = i;
                                break;
                            }
                        }
                        choice
                    }
                };
                vec![pick as f64]
            }
        }
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Recurrent state carried between single-episode [`Policy::act`] calls.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub action: Vec<f64>,
    pub logp: f64,
    pub entropy: f64,
    pub state: RecurrentState,
}

/// Per-timestep log-probabilities and entropies on a tape, each
/// `batch x 1`.
pub struct ScoredBatch {
    pub logps: Vec<Var>,
    pub entropies: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    lstm: Lstm,
    mlp: Mlp,
    head: Linear,
    log_std: String,
    embedding: Option<Embedding>,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        if config.lstm_size == 0 || config.mlp_size == 0 {
            return Err(Error::Config("policy layer sizes must be at least 1".into()));
        }
        if config.max_contexts == 0 {
            return Err(Error::Config("policy needs at least one context".into()));
        }
        let (embedding, enc) = match config.encoding {
            ContextEncoding::OneHot => (None, config.max_contexts),
            ContextEncoding::Embedding { dim } => (Some(Embedding::new("policy.embed", config.max_contexts, dim)), dim),
        };
        let out = match config.head {
            HeadKind::Gaussian { dim } => dim,
            HeadKind::Categorical { count } => count,
        };
        Ok(Policy {
            lstm: Lstm::new("policy.lstm", config.obs_dim + enc, config.lstm_size),
            mlp: Mlp::new("policy.mlp", &[config.lstm_size, config.mlp_size], Activation::Tanh),
            head: Linear::new("policy.head", config.mlp_size, out),
            log_std: "policy.log_std".into(),
            embedding,
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.lstm.init(store, rng);
        self.mlp.init(store, rng);
        self.head.init(store, rng);
        if let HeadKind::Gaussian { dim } = self.config.head {
            store.insert(&self.log_std, Tensor::filled(&[dim], self.config.init_log_std));
        }
        if let Some(e) = &self.embedding {
            e.init(store, rng);
        }
    }

    pub fn embedding(&self) -> Option<&Embedding> {
        self.embedding.as_ref()
    }

    pub fn log_std_name(&self) -> &str {
        &self.log_std
    }

    /// Width of the context encoding.
    pub fn encoding_width(&self) -> usize {
        match self.config.encoding {
            ContextEncoding::OneHot => self.config.max_contexts,
            ContextEncoding::Embedding { dim } => dim,
        }
    }

    fn check_context(&self, ctx: &ContextInput, k_active: usize) -> Result<()> {
        match ctx {
            ContextInput::Id(i) if *i >= k_active.min(self.config.max_contexts) => {
                Err(Error::Context { id: *i, k: k_active })
            }
            ContextInput::Vector { values, .. } if values.len() != self.encoding_width() => Err(Error::dim(
                "context vector",
                format!("width {}, expected {}", values.len(), self.encoding_width()),
            )),
            _ => Ok(()),
        }
    }

    /// Plain encoding values, one row per context.
    pub fn context_values(&self, store: &ParamStore, ctxs: &[ContextInput], k_active: usize) -> Result<Tensor> {
        let w = self.encoding_width();
        let mut data = Vec::with_capacity(ctxs.len() * w);
        for ctx in ctxs {
            self.check_context(ctx, k_active)?;
            match ctx {
                ContextInput::Vector { values, .. } => data.extend_from_slice(values),
                ContextInput::Id(i) => match &self.embedding {
                    None => {
                        let mut row = vec![0.0; w];
                        row[*i] = 1.0;
                        data.extend(row);
                    }
                    Some(e) => data.extend_from_slice(store.get(&e.table)?.row(*i)),
                },
            }
        }
        Ok(Tensor::matrix(ctxs.len(), w, data))
    }

    /// Encoding on the tape. Embedding rows selected by id receive
    /// gradients; explicit vectors and one-hot rows are constants.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, ctxs: &[ContextInput], k_active: usize) -> Result<Var> {
        let ids: Option<Vec<usize>> = ctxs
            .iter()
            .map(|c| match c {
                ContextInput::Id(i) => Some(*i),
                _ => None,
            })
            .collect();
        match (&self.embedding, ids) {
            (Some(e), Some(ids)) => {
                for c in ctxs {
                    self.check_context(c, k_active)?;
                }
                e.lookup(tape, store, &ids)
            }
            _ => {
                let v = self.context_values(store, ctxs, k_active)?;
                Ok(tape.constant(v))
            }
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        self.lstm.zero_state(tape, batch)
    }

    /// One step for a batch: returns the action distribution and new state.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
        ctx: Var,
        state: LstmState,
    ) -> Result<(ActionDist, LstmState)> {
        let x = tape.concat_cols(&[obs, ctx])?;
        let state = self.lstm.step(tape, store, x, state)?;
        let h = self.mlp.forward(tape, store, state.h)?;
        let out = self.head.forward(tape, store, h)?;
        let dist = match self.config.head {
            HeadKind::Gaussian { .. } => ActionDist::Gaussian {
                mean: out,
                log_std: tape.param(store, &self.log_std)?,
            },
            HeadKind::Categorical { .. } => ActionDist::Categorical {
                log_probs: tape.log_softmax(out)?,
            },
        };
        Ok((dist, state))
    }

    /// Single-episode step with explicit recurrent state.
    #[allow(clippy::too_many_arguments)]
    pub fn act(
        &self,
        store: &ParamStore,
        obs: &[f64],
        ctx: &ContextInput,
        k_active: usize,
        state: &RecurrentState,
        rng: &mut Rng,
        mode: ActionMode,
    ) -> Result<ActOutput> {
        let n = self.config.lstm_size;
        if state.h.len() != n || state.c.len() != n {
            return Err(Error::dim("recurrent state", format!("expected width {n}")));
        }
        let mut tape = Tape::new();
        let o = tape.constant(Tensor::matrix(1, obs.len(), obs.to_vec()));
        let c = self.encode(&mut tape, store, std::slice::from_ref(ctx), k_active)?;
        let s = LstmState {
            h: tape.constant(Tensor::matrix(1, n, state.h.clone())),
            c: tape.constant(Tensor::matrix(1, n, state.c.clone())),
        };
        let (dist, next) = self.step(&mut tape, store, o, c, s)?;
        let action = dist.sample(&tape, 0, mode, rng);
        let w = action.len();
        let lp = dist.log_prob(&mut tape, Tensor::matrix(1, w, action.clone()))?;
        let ent = dist.entropy(&mut tape)?;
        Ok(ActOutput {
            logp: tape.value(lp).item(),
            entropy: tape.value(ent).item(),
            state: RecurrentState {
                h: tape.value(next.h).data().to_vec(),
                c: tape.value(next.c).data().to_vec(),
            },
            action,
        })
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState {
            h: vec![0.0; self.config.lstm_size],
            c: vec![0.0; self.config.lstm_size],
        }
    }

    /// Roll out one episode per `(context, seed)` pair, all in lockstep.
    pub fn rollout_batch(
        &self,
        store: &ParamStore,
        env: &EnvConfig,
        contexts: &[ContextInput],
        seeds: &[u64],
        k_active: usize,
        mode: ActionMode,
    ) -> Result<Vec<Trajectory>> {
        if contexts.len() != seeds.len() {
            return Err(Error::Batch(format!(
                "{} contexts for {} seeds",
                contexts.len(),
                seeds.len()
            )));
        }
        let b = contexts.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let mut envs: Vec<_> = (0..b).map(|_| env.build()).collect();
        let spec = envs[0].spec();
        if spec.obs_dim != self.config.obs_dim {
            return Err(Error::dim(
                "policy observation",
                format!("env has {}, policy expects {}", spec.obs_dim, self.config.obs_dim),
            ));
        }
        let mut rngs: Vec<Rng> = seeds.iter().map(|&s| Rng::seed_from_u64(s)).collect();
        let ctx_values = self.context_values(store, contexts, k_active)?;
        let mut trajs: Vec<Trajectory> = contexts
            .iter()
            .zip(envs.iter_mut())
            .zip(seeds)
            .map(|((c, e), &seed)| Trajectory {
                context_id: c.label(),
                states: vec![e.reset(seed)],
                actions: Vec::with_capacity(spec.horizon),
                logps: Vec::with_capacity(spec.horizon),
                rewards: Vec::with_capacity(spec.horizon),
                entropies: Vec::with_capacity(spec.horizon),
            })
            .collect();

        let n = self.config.lstm_size;
        let mut h = Tensor::zeros(&[b, n]);
        let mut c = Tensor::zeros(&[b, n]);
        for _t in 0..spec.horizon {
            let mut tape = Tape::new();
            let obs_rows: Vec<&[f64]> = trajs.iter().map(|tr| tr.states.last().unwrap().as_slice()).collect();
            let obs = tape.constant(Tensor::from_rows(&obs_rows)?);
            let ctx = tape.constant(ctx_values.clone());
            let state = LstmState {
                h: tape.constant(h),
                c: tape.constant(c),
            };
            let (dist, next) = self.step(&mut tape, store, obs, ctx, state)?;
            let actions: Vec<Vec<f64>> = (0..dist.batch(&tape))
                .map(|i| dist.sample(&tape, i, mode, &mut rngs[i]))
                .collect();
            let lp = dist.log_prob(&mut tape, Tensor::from_rows(&actions)?)?;
            let ent = dist.entropy(&mut tape)?;
            for (i, (tr, a)) in trajs.iter_mut().zip(actions).enumerate() {
                let r = envs[i].step(&a)?;
                tr.logps.push(tape.value(lp).data()[i]);
                tr.entropies.push(tape.value(ent).data()[i]);
                tr.rewards.push(r.reward);
                tr.actions.push(a);
                tr.states.push(r.next_obs);
            }
            h = tape.value(next.h).clone();
            c = tape.value(next.c).clone();
        }
        Ok(trajs)
    }

    /// Single-episode rollout.
    pub fn rollout(
        &self,
        store: &ParamStore,
        env: &EnvConfig,
        ctx: &ContextInput,
        seed: u64,
        k_active: usize,
        mode: ActionMode,
    ) -> Result<Trajectory> {
        let mut v = self.rollout_batch(store, env, std::slice::from_ref(ctx), &[seed], k_active, mode)?;
        Ok(v.remove(0))
    }

    /// Re-run the policy over stored trajectories (all of equal horizon)
    /// and record per-step log-probabilities of the stored actions and
    /// entropies. Visited states enter as constants.
    pub fn score(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        trajs: &[&Trajectory],
        k_active: usize,
    ) -> Result<ScoredBatch> {
        let b = trajs.len();
        let horizon = trajs.first().map_or(0, |t| t.horizon());
        if trajs
            .iter()
            .any(|t| t.horizon() != horizon || t.states.len() != horizon + 1)
        {
            return Err(Error::Batch(
                "trajectories in a scoring batch must share one horizon".into(),
            ));
        }
        let ctxs: Vec<ContextInput> = trajs.iter().map(|t| ContextInput::Id(t.context_id)).collect();
        let ctx = self.encode(tape, store, &ctxs, k_active)?;
        let mut state = self.zero_state(tape, b);
        let mut out = ScoredBatch {
            logps: Vec::with_capacity(horizon),
            entropies: Vec::with_capacity(horizon),
        };
        for t in 0..horizon {
            let rows: Vec<&[f64]> = trajs.iter().map(|tr| tr.states[t].as_slice()).collect();
            let obs = tape.constant(Tensor::from_rows(&rows)?);
            let (dist, next) = self.step(tape, store, obs, ctx, state)?;
            let acts: Vec<&[f64]> = trajs.iter().map(|tr| tr.actions[t].as_slice()).collect();
            out.logps.push(dist.log_prob(tape, Tensor::from_rows(&acts)?)?);
            out.entropies.push(dist.entropy(tape)?);
            state = next;
        }
        Ok(out)
    }

    /// Per-step log-probabilities of a stored trajectory's actions.
    pub fn logprob(&self, store: &ParamStore, traj: &Trajectory, k_active: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let scored = self.score(&mut tape, store, &[traj], k_active)?;
        Ok(scored.logps.iter().map(|v| tape.value(*v).item()).collect())
    }
}

/// Convex combination `(1 - alpha) e1 + alpha e2` of two encodings.
pub fn interpolate_contexts(e1: &[f64], e2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if e1.len() != e2.len() {
        return Err(Error::dim(
            "interpolate_contexts",
            format!("widths {} and {}", e1.len(), e2.len()),
        ));
    }
    if alpha == 0.0 {
        return Ok(e1.to_vec());
    }
    if alpha == 1.0 {
        return Ok(e2.to_vec());
    }
    Ok(e1.iter().zip(e2).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect())
}

/// `V(s, c)`: MLP(64, 64, tanh) then a scalar head, on
/// `concat(obs, context encoding)`.
#[derive(Clone, Debug)]
pub struct ValueNet {
    mlp: Mlp,
    head: Linear,
}

impl ValueNet {
    pub fn new(input: usize) -> Self {
        ValueNet {
            mlp: Mlp::new("value.mlp", &[input, 64, 64], Activation::Tanh),
            head: Linear::new("value.head", 64, 1),
        }
    }

    pub fn with_sizes(input: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        let last = *sizes.last().unwrap();
        ValueNet {
            mlp: Mlp::new("value.mlp", &sizes, Activation::Tanh),
            head: Linear::new("value.head", last, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.mlp.init(store, rng);
        self.head.init(store, rng);
    }

    /// Values for a batch of inputs, shape `batch x 1`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: Var) -> Result<Var> {
        let h = self.mlp.forward(tape, store, inputs)?;
        self.head.forward(tape, store, h)
    }

    /// Plain-valued convenience for one `(state, encoding)` pair.
    pub fn value(&self, store: &ParamStore, state: &[f64], encoding: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut row = state.to_vec();
        row.extend_from_slice(encoding);
        let x = tape.constant(Tensor::matrix(1, row.len(), row));
        let v = self.forward(&mut tape, store, x)?;
        Ok(tape.value(v).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnumerableMdp;
    use crate::rng::rng_from;

    fn point_policy(encoding: ContextEncoding) -> (Policy, ParamStore) {
        let env = EnvConfig::Point {
            horizon: 65,
            wall_penalty: 0.0,
        };
        let cfg = PolicyConfig::for_env(&env.spec(), encoding, 4);
        let p = Policy::new(cfg).unwrap();
        let mut s = ParamStore::new();
        p.init(&mut s, &mut rng_from(9, &[]));
        (p, s)
    }

    #[test]
    fn gaussian_entropy_closed_form() {
        let (p, s) = point_policy(ContextEncoding::OneHot);
        let out = p
            .act(
                &s,
                &[0.1, 0.2, 0.0, 0.0],
                &ContextInput::Id(1),
                4,
                &p.initial_state(),
                &mut rng_from(1, &[]),
                ActionMode::Stochastic,
            )
            .unwrap();
        assert!((out.entropy - 2.0 * 1.418_938_5).abs() < 1e-6);
    }

    #[test]
    fn categorical_uniform_entropy() {
        let mdp = EnumerableMdp::new(vec![vec![0, 0, 0, 0]], 0, 3).unwrap();
        let env = EnvConfig::Chain(mdp);
        let cfg = PolicyConfig::for_env(&env.spec(), ContextEncoding::OneHot, 2);
        let p = Policy::new(cfg).unwrap();
        let mut s = ParamStore::new();
        p.init(&mut s, &mut rng_from(0, &[]));
        s.get_mut("policy.head.w").unwrap().fill(0.0);
        let out = p
            .act(
                &s,
                &[1.0],
                &ContextInput::Id(0),
                2,
                &p.initial_state(),
                &mut rng_from(0, &[]),
                ActionMode::Stochastic,
            )
            .unwrap();
        assert!((out.entropy - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn act_is_deterministic_under_seed() {
        let (p, s) = point_policy(ContextEncoding::Embedding { dim: 32 });
        let run = || {
            p.act(
                &s,
                &[0.0; 4],
                &ContextInput::Id(2),
                4,
                &p.initial_state(),
                &mut rng_from(77, &[]),
                ActionMode::Stochastic,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inactive_context_rejected() {
        let (p, s) = point_policy(ContextEncoding::OneHot);
        let err = p.act(
            &s,
            &[0.0; 4],
            &ContextInput::Id(3),
            3,
            &p.initial_state(),
            &mut rng_from(0, &[]),
            ActionMode::Stochastic,
        );
        assert!(matches!(err, Err(Error::Context { id: 3, k: 3 })));
    }

    #[test]
    fn zero_horizon_rollout() {
        let (p, s) = point_policy(ContextEncoding::OneHot);
        let env = EnvConfig::Point {
            horizon: 0,
            wall_penalty: 0.0,
        };
        let tr = p
            .rollout(&s, &env, &ContextInput::Id(0), 5, 4, ActionMode::Stochastic)
            .unwrap();
        assert_eq!(tr.states.len(), 1);
        assert!(tr.actions.is_empty());
    }

    #[test]
    fn zero_net_deterministic_rollout_stays_at_origin() {
        let (p, mut s) = point_policy(ContextEncoding::OneHot);
        s.get_mut("policy.head.w").unwrap().fill(0.0);
        let env = EnvConfig::Point {
            horizon: 65,
            wall_penalty: 0.0,
        };
        let tr = p
            .rollout(&s, &env, &ContextInput::Id(0), 5, 4, ActionMode::Deterministic)
            .unwrap();
        assert_eq!(tr.states.len(), 66);
        assert!(tr.states.iter().all(|x| x == &vec![0.0; 4]));
    }

    #[test]
    fn rescoring_reproduces_logps() {
        for enc in [ContextEncoding::OneHot, ContextEncoding::Embedding { dim: 32 }] {
            let (p, s) = point_policy(enc);
            let env = EnvConfig::Point {
                horizon: 20,
                wall_penalty: 0.0,
            };
            let ctxs: Vec<_> = (0..4).map(ContextInput::Id).collect();
            let trajs = p
                .rollout_batch(&s, &env, &ctxs, &[1, 2, 3, 4], 4, ActionMode::Stochastic)
                .unwrap();
            for tr in &trajs {
                let again = p.logprob(&s, tr, 4).unwrap();
                let a: f64 = again.iter().sum();
                let b: f64 = tr.logps.iter().sum();
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_composition_does_not_change_episodes() {
        let (p, s) = point_policy(ContextEncoding::Embedding { dim: 32 });
        let env = EnvConfig::Point {
            horizon: 30,
            wall_penalty: 0.0,
        };
        let ctxs: Vec<_> = (0..4).map(ContextInput::Id).collect();
        let all = p
            .rollout_batch(&s, &env, &ctxs, &[10, 11, 12, 13], 4, ActionMode::Stochastic)
            .unwrap();
        let single = p
            .rollout(&s, &env, &ContextInput::Id(2), 12, 4, ActionMode::Stochastic)
            .unwrap();
        assert_eq!(all[2], single);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        assert_eq!(
            interpolate_contexts(&[1.0, 0.0], &[0.0, 1.0], 0.0).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            interpolate_contexts(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(),
            vec![0.0, 1.0]
        );
        assert_eq!(
            interpolate_contexts(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(interpolate_contexts(&[1.0], &[0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn zero_value_net_is_zero_and_context_matters() {
        let v = ValueNet::new(6);
        let mut s = ParamStore::new();
        v.init(&mut s, &mut rng_from(4, &[]));
        let a = v.value(&s, &[0.1, 0.2, 0.3, 0.4], &[1.0, 0.0]).unwrap();
        let b = v.value(&s, &[0.1, 0.2, 0.3, 0.4], &[0.0, 1.0]).unwrap();
        assert_ne!(a, b);
        s.get_mut("value.head.w").unwrap().fill(0.0);
        assert_eq!(v.value(&s, &[0.1, 0.2, 0.3, 0.4], &[1.0, 0.0]).unwrap(), 0.0);
    }
}
