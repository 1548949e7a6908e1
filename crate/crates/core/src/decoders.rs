//! Decoders `P_D(c | tau)` and the trajectory preprocessing they use.
//!
//! * `Valor`: bidirectional LSTM over the deltas between 11 equally spaced
//!   observations; never sees actions.
//! * `ValorStates`: the same network fed the 11 observations directly.
//! * `Vic`: MLP(180, 180) on the final observation only.
//! * `Diayn`: MLP(180, 180) applied to every observation independently;
//!   the trajectory log-probability is the sum of per-state terms.
//!
//! All output layers are sized for `max_contexts`; only the first `k`
//! logits enter the softmax, so growing `k` never reshapes parameters.

use std::str::FromStr;

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::nn::{Activation, BiLstm, Linear, Mlp};
use crate::params::ParamStore;
use crate::policy::Trajectory;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SUBSAMPLE_POINTS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Valor,
    ValorStates,
    Vic,
    Diayn,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Valor => "valor",
            DecoderKind::ValorStates => "valor_states",
            DecoderKind::Vic => "vic",
            DecoderKind::Diayn => "diayn",
        }
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valor" => Ok(DecoderKind::Valor),
            "valor_states" => Ok(DecoderKind::ValorStates),
            "vic" => Ok(DecoderKind::Vic),
            "diayn" => Ok(DecoderKind::Diayn),
            other => Err(Error::Config(format!("unknown decoder `{other}`"))),
        }
    }
}

/// Indices `round_half_up(i * (len - 1) / (n - 1))` for `i in 0..n`, with
/// duplicates removed. When `n >= len` every index is returned.
pub fn subsample_indices(len: usize, n: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptySequence("subsample"));
    }
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 subsample points, got {n}")));
    }
    if n >= len {
        return Ok((0..len).collect());
    }
    let (span, den) = (len - 1, n - 1);
    let mut out: Vec<usize> = (0..n).map(|i| (2 * i * span + den) / (2 * den)).collect();
    out.dedup();
    Ok(out)
}

pub fn subsample_observations(states: &[Vec<f64>], n: usize) -> Result<Vec<Vec<f64>>> {
    Ok(subsample_indices(states.len(), n)?
        .into_iter()
        .map(|i| states[i].clone())
        .collect())
}

/// `out[i] = sampled[i + 1] - sampled[i]`.
pub fn k_step_deltas(sampled: &[Vec<f64>]) -> Vec<Vec<f64>> {
    sampled
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub logp_per_context: Vec<f64>,
    pub chosen_logp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiaynOutput {
    pub per_step: Vec<DecoderOutput>,
    pub total_logp: f64,
}

/// Plain-valued decoder result used for rewards and metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryScore {
    /// `log P_D(c | tau)`; for DIAYN the sum over states.
    pub chosen_logp: f64,
    /// DIAYN only: `log P_D(c | s_t)` for every visited state.
    pub per_state: Vec<f64>,
}

/// Decoder tensors on a tape.
pub struct DecoderVars {
    /// `rows x k` log-probabilities; rows are trajectories, or all visited
    /// states (trajectory-major) for DIAYN.
    pub log_probs: Var,
    /// Chosen-context entry of every row, `rows x 1`.
    pub chosen: Var,
    pub rows_per_trajectory: usize,
}

#[derive(Clone, Debug)]
enum Net {
    Recurrent { bilstm: BiLstm, out: Linear },
    Feedforward { mlp: Mlp, out: Linear },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub obs_dim: usize,
    pub max_contexts: usize,
    net: Net,
}

impl Decoder {
    /// Default sizes: BiLSTM with 64 cells per direction, or MLP(180, 180).
    pub fn new(kind: DecoderKind, obs_dim: usize, max_contexts: usize) -> Result<Self> {
        match kind {
            DecoderKind::Valor | DecoderKind::ValorStates => Self::recurrent(kind, obs_dim, max_contexts, 64),
            DecoderKind::Vic | DecoderKind::Diayn => Self::feedforward(kind, obs_dim, max_contexts, &[180, 180]),
        }
    }

    pub fn recurrent(kind: DecoderKind, obs_dim: usize, max_contexts: usize, cell: usize) -> Result<Self> {
        if !matches!(kind, DecoderKind::Valor | DecoderKind::ValorStates) {
            return Err(Error::Config(format!("{} decoder is not recurrent", kind.name())));
        }
        Self::check_k(max_contexts)?;
        let bilstm = BiLstm::new("decoder.bilstm", obs_dim, cell);
        let out = Linear::new("decoder.out", bilstm.output(), max_contexts);
        Ok(Decoder {
            kind,
            obs_dim,
            max_contexts,
            net: Net::Recurrent { bilstm, out },
        })
    }

    pub fn feedforward(kind: DecoderKind, obs_dim: usize, max_contexts: usize, hidden: &[usize]) -> Result<Self> {
        if !matches!(kind, DecoderKind::Vic | DecoderKind::Diayn) {
            return Err(Error::Config(format!("{} decoder is not feedforward", kind.name())));
        }
        Self::check_k(max_contexts)?;
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        let mlp = Mlp::new("decoder.mlp", &sizes, Activation::Tanh);
        let out = Linear::new("decoder.out", mlp.output(), max_contexts);
        Ok(Decoder {
            kind,
            obs_dim,
            max_contexts,
            net: Net::Feedforward { mlp, out },
        })
    }

    fn check_k(k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Config("decoder needs K >= 1".into()));
        }
        Ok(())
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        match &self.net {
            Net::Recurrent { bilstm, out } => {
                bilstm.init(store, rng);
                out.init(store, rng);
            }
            Net::Feedforward { mlp, out } => {
                mlp.init(store, rng);
                out.init(store, rng);
            }
        }
    }

    /// Name of the output-layer weight (used by tests that zero the net).
    pub fn output_weight(&self) -> &str {
        match &self.net {
            Net::Recurrent { out, .. } | Net::Feedforward { out, .. } => &out.weight,
        }
    }

    /// The observation sequence the recurrent decoders read.
    pub fn recurrent_inputs(&self, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
        let sampled = subsample_observations(&traj.states, SUBSAMPLE_POINTS)?;
        Ok(match self.kind {
            DecoderKind::Valor => k_step_deltas(&sampled),
            _ => sampled,
        })
    }

    fn logits_to_logp(&self, tape: &mut Tape, logits: Var, k: usize) -> Result<Var> {
        let active = tape.slice_cols(logits, 0, k)?;
        tape.log_softmax(active)
    }

    /// Forward pass for a batch of trajectories with equal length.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, trajs: &[&Trajectory], k: usize) -> Result<DecoderVars> {
        if k == 0 || k > self.max_contexts {
            return Err(Error::Config(format!("K = {k} outside 1..={}", self.max_contexts)));
        }
        if let Some(t) = trajs.iter().find(|t| t.context_id >= k) {
            return Err(Error::Context { id: t.context_id, k });
        }
        let len = trajs.first().map_or(0, |t| t.states.len());
        if trajs.is_empty() || trajs.iter().any(|t| t.states.len() != len) {
            return Err(Error::Batch(
                "decoder batch needs non-empty, equal-length trajectories".into(),
            ));
        }
        let ids: Vec<usize> = trajs.iter().map(|t| t.context_id).collect();
        match (&self.net, self.kind) {
            (Net::Recurrent { bilstm, out }, _) => {
                let seqs = trajs
                    .iter()
                    .map(|t| self.recurrent_inputs(t))
                    .collect::<Result<Vec<_>>>()?;
                let steps = seqs[0].len();
                let mut inputs = Vec::with_capacity(steps);
                for s in 0..steps {
                    let rows: Vec<&[f64]> = seqs.iter().map(|q| q[s].as_slice()).collect();
                    inputs.push(tape.constant(Tensor::from_rows(&rows)?));
                }
                let h = bilstm.run(tape, store, &inputs)?;
                let logits = out.forward(tape, store, h)?;
                let log_probs = self.logits_to_logp(tape, logits, k)?;
                let chosen = tape.pick_cols(log_probs, &ids)?;
                Ok(DecoderVars {
                    log_probs,
                    chosen,
                    rows_per_trajectory: 1,
                })
            }
            (Net::Feedforward { mlp, out }, DecoderKind::Vic) => {
                let rows: Vec<&[f64]> = trajs.iter().map(|t| t.states.last().unwrap().as_slice()).collect();
                let x = tape.constant(Tensor::from_rows(&rows)?);
                let h = mlp.forward(tape, store, x)?;
                let logits = out.forward(tape, store, h)?;
                let log_probs = self.logits_to_logp(tape, logits, k)?;
                let chosen = tape.pick_cols(log_probs, &ids)?;
                Ok(DecoderVars {
                    log_probs,
                    chosen,
                    rows_per_trajectory: 1,
                })
            }
            (Net::Feedforward { mlp, out }, _) => {
                let rows: Vec<&[f64]> = trajs.iter().flat_map(|t| t.states.iter().map(Vec::as_slice)).collect();
                let x = tape.constant(Tensor::from_rows(&rows)?);
                let h = mlp.forward(tape, store, x)?;
                let logits = out.forward(tape, store, h)?;
                let log_probs = self.logits_to_logp(tape, logits, k)?;
                let per_row: Vec<usize> = ids.iter().flat_map(|&c| std::iter::repeat_n(c, len)).collect();
                let chosen = tape.pick_cols(log_probs, &per_row)?;
                Ok(DecoderVars {
                    log_probs,
                    chosen,
                    rows_per_trajectory: len,
                })
            }
        }
    }

    /// VALOR / VIC decode of one trajectory.
    pub fn decode(&self, store: &ParamStore, traj: &Trajectory, k: usize) -> Result<DecoderOutput> {
        if self.kind == DecoderKind::Diayn {
            let d = self.decode_diayn(store, traj, k)?;
            let logp = d.per_step.iter().fold(vec![0.0; k], |mut acc, s| {
                acc.iter_mut().zip(&s.logp_per_context).for_each(|(a, b)| *a += b);
                acc
            });
            return Ok(DecoderOutput {
                logp_per_context: logp,
                chosen_logp: d.total_logp,
            });
        }
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, &[traj], k)?;
        Ok(DecoderOutput {
            logp_per_context: tape.value(v.log_probs).row(0).to_vec(),
            chosen_logp: tape.value(v.chosen).item(),
        })
    }

    pub fn decode_diayn(&self, store: &ParamStore, traj: &Trajectory, k: usize) -> Result<DiaynOutput> {
        if self.kind != DecoderKind::Diayn {
            return Err(Error::Unsupported(format!(
                "per-state decode with {} decoder",
                self.kind.name()
            )));
        }
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, &[traj], k)?;
        let lp = tape.value(v.log_probs);
        let ch = tape.value(v.chosen);
        let per_step: Vec<DecoderOutput> = (0..lp.rows())
            .map(|r| DecoderOutput {
                logp_per_context: lp.row(r).to_vec(),
                chosen_logp: ch.data()[r],
            })
            .collect();
        let total_logp = per_step.iter().map(|s| s.chosen_logp).sum();
        Ok(DiaynOutput { per_step, total_logp })
    }

    /// Read-only scores for a batch (trajectories may differ in length).
    pub fn score_batch(&self, store: &ParamStore, trajs: &[&Trajectory], k: usize) -> Result<Vec<TrajectoryScore>> {
        let mut out = Vec::with_capacity(trajs.len());
        let mut start = 0;
        while start < trajs.len() {
            let len = trajs[start].states.len();
            let end = trajs[start..]
                .iter()
                .position(|t| t.states.len() != len)
                .map_or(trajs.len(), |p| start + p);
            let group = &trajs[start..end];
            let mut tape = Tape::new();
            let v = self.forward(&mut tape, store, group, k)?;
            let chosen = tape.value(v.chosen).data();
            for g in 0..group.len() {
                let rows = &chosen[g * v.rows_per_trajectory..(g + 1) * v.rows_per_trajectory];
                out.push(TrajectoryScore {
                    chosen_logp: rows.iter().sum(),
                    per_state: if self.kind == DecoderKind::Diayn {
                        rows.to_vec()
                    } else {
                        Vec::new()
                    },
                });
            }
            start = end;
        }
        Ok(out)
    }

    /// Negative mean chosen log-probability over trajectories, on a tape.
    pub fn nll(&self, tape: &mut Tape, store: &ParamStore, trajs: &[&Trajectory], k: usize) -> Result<Var> {
        let v = self.forward(tape, store, trajs, k)?;
        let s = tape.sum(v.chosen);
        Ok(tape.scale(s, -1.0 / trajs.len() as f64))
    }

    /// One Adam step maximizing mean `log P_D(c | tau)`. Returns the mean
    /// before the update.
    pub fn supervised_update(
        &self,
        store: &mut ParamStore,
        batch: &[&Trajectory],
        k: usize,
        opt: &Adam,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Batch("empty decoder batch".into()));
        }
        let mut tape = Tape::new();
        let loss = self.nll(&mut tape, store, batch, k)?;
        let before = -tape.value(loss).item();
        let grads = tape.backward(loss)?;
        grads.accumulate_into(store)?;
        opt.step(store)?;
        Ok(before)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn traj(states: Vec<Vec<f64>>, context_id: usize) -> Trajectory {
        let t = states.len() - 1;
        Trajectory {
            context_id,
            actions: vec![vec![0.0, 0.0]; t],
            logps: vec![0.0; t],
            rewards: vec![0.0; t],
            entropies: vec![0.0; t],
            states,
        }
    }

    fn random_states(n: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::RngExt;
        let mut r = rng_from(seed, &[]);
        (0..n)
            .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn subsample_66_by_11() {
        let idx = subsample_indices(66, 11).unwrap();
        assert_eq!(idx, vec![0, 7, 13, 20, 26, 33, 39, 46, 52, 59, 65]);
    }

    #[test]
    fn subsample_identity_and_short() {
        assert_eq!(subsample_indices(11, 11).unwrap(), (0..11).collect::<Vec<_>>());
        assert_eq!(subsample_indices(3, 11).unwrap(), vec![0, 1, 2]);
        assert!(subsample_indices(5, 1).is_err());
    }

    #[test]
    fn deltas() {
        let s = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(k_step_deltas(&s), vec![vec![1.0]; 3]);
        let still = vec![vec![0.4, -0.2]; 5];
        assert!(k_step_deltas(&still).iter().all(|d| d == &vec![0.0, 0.0]));
    }

    #[test]
    fn zero_decoders_are_uniform() {
        for kind in [DecoderKind::Valor, DecoderKind::ValorStates, DecoderKind::Vic] {
            let d = Decoder::new(kind, 4, 8).unwrap();
            let mut s = ParamStore::new();
            d.init(&mut s, &mut rng_from(1, &[]));
            s.get_mut(d.output_weight()).unwrap().fill(0.0);
            let out = d.decode(&s, &traj(random_states(66, 2), 3), 5).unwrap();
            for v in out.logp_per_context {
                assert!((v + 5f64.ln()).abs() < 1e-12);
            }
        }
        let d = Decoder::new(DecoderKind::Diayn, 4, 8).unwrap();
        let mut s = ParamStore::new();
        d.init(&mut s, &mut rng_from(1, &[]));
        s.get_mut(d.output_weight()).unwrap().fill(0.0);
        let out = d.decode_diayn(&s, &traj(random_states(66, 2), 3), 4).unwrap();
        assert!((out.total_logp + 66.0 * 4f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn k_zero_is_config_error() {
        assert!(Decoder::new(DecoderKind::Valor, 4, 0).is_err());
        let d = Decoder::new(DecoderKind::Vic, 4, 3).unwrap();
        let mut s = ParamStore::new();
        d.init(&mut s, &mut rng_from(1, &[]));
        assert!(matches!(
            d.decode(&s, &traj(random_states(5, 1), 0), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn diayn_total_is_sum_of_independent_states() {
        let d = Decoder::new(DecoderKind::Diayn, 4, 6).unwrap();
        let mut s = ParamStore::new();
        d.init(&mut s, &mut rng_from(5, &[]));
        let states = random_states(9, 8);
        let full = d.decode_diayn(&s, &traj(states.clone(), 2), 6).unwrap();
        let by_hand: f64 = states
            .iter()
            .map(|st| d.decode_diayn(&s, &traj(vec![st.clone()], 2), 6).unwrap().total_logp)
            .sum();
        assert!((full.total_logp - by_hand).abs() < 1e-12);

        let single = d.decode_diayn(&s, &traj(vec![states[0].clone()], 2), 6).unwrap();
        assert_eq!(single.total_logp, single.per_step[0].chosen_logp);
    }

    #[test]
    fn batch_scores_match_single_decodes() {
        for kind in [DecoderKind::Valor, DecoderKind::Vic, DecoderKind::Diayn] {
            let d = Decoder::new(kind, 4, 5).unwrap();
            let mut s = ParamStore::new();
            d.init(&mut s, &mut rng_from(6, &[]));
            let trajs: Vec<Trajectory> = (0..4).map(|i| traj(random_states(20, i), i as usize)).collect();
            let refs: Vec<&Trajectory> = trajs.iter().collect();
            let batch = d.score_batch(&s, &refs, 5).unwrap();
            for (t, b) in trajs.iter().zip(&batch) {
                let one = d.decode(&s, t, 5).unwrap();
                assert!((one.chosen_logp - b.chosen_logp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_lr_update_leaves_params() {
        let d = Decoder::new(DecoderKind::Vic, 4, 3).unwrap();
        let mut s = ParamStore::new();
        d.init(&mut s, &mut rng_from(2, &[]));
        let before = s.clone();
        let t = traj(random_states(4, 3), 1);
        let m = d.supervised_update(&mut s, &[&t], 3, &Adam::with_lr(0.0)).unwrap();
        let expected = d.decode(&before, &t, 3).unwrap().chosen_logp;
        assert!((m - expected).abs() < 1e-15);
        for (name, e) in before.entries() {
            assert_eq!(s.get(name).unwrap(), &e.value);
        }
    }

    #[test]
    fn separable_batch_is_learned() {
        // two contexts: one moves right, the other left
        let d = Decoder::recurrent(DecoderKind::Valor, 4, 2, 8).unwrap();
        let mut s = ParamStore::new();
        d.init(&mut s, &mut rng_from(4, &[]));
        let line = |dir: f64| {
            (0..21)
                .map(|t| vec![dir * t as f64 * 0.05, 0.0, dir * 0.05, 0.0])
                .collect::<Vec<_>>()
        };
        let batch = [traj(line(1.0), 0), traj(line(-1.0), 1)];
        let refs: Vec<&Trajectory> = batch.iter().collect();
        let opt = Adam::with_lr(1e-2);
        let mut steps = 0;
        loop {
            let mean_logp = d.supervised_update(&mut s, &refs, 2, &opt).unwrap();
            if mean_logp.exp() >= 0.99 {
                break;
            }
            steps += 1;
            assert!(steps < 500, "not separated after 500 steps");
        }
    }
}
