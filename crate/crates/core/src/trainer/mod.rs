//! The training loop: sample contexts and trajectories, score them with
//! the decoder, build advantages, then take one Adam step each on the
//! policy, the value network and the decoder.
//!
//! A run directory holds `config.txt` (flat snapshot), `metrics.csv`,
//! `summary.json` and the checkpoints `policy.ckpt`, `value.ckpt` and
//! (unless the run is the random-reward baseline) `decoder.ckpt`.

mod advantage;
mod config;
mod curriculum;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use advantage::{compute_advantages, discounted_returns, normalize, AdvantageBatch, AdvantageForm, NORMALIZE_EPS};
pub use config::{
    parse_flat, Algo, ContextSchedule, EnvName, TrainerConfig, CHAIN_HORIZON, CHAIN_STATES, DEFAULT_BETA,
    DEFAULT_EMBED_DIM, DEFAULT_PATHS, DEFAULT_THRESHOLD, PAPER_PATHS,
};
pub use curriculum::{next_k, sample_context, CurriculumState, RandomRewardSpec};

use crate::adam::Adam;
use crate::decoders::{Decoder, DecoderKind, TrajectoryScore};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::par::Executor;
use crate::params::ParamStore;
use crate::policy::{ActionMode, ContextEncoding, ContextInput, Policy, PolicyConfig, Trajectory, ValueNet};
use crate::rng::{
    derive_seed, rng_from, TAG_CONTEXTS, TAG_EPISODE, TAG_INIT_DECODER, TAG_INIT_POLICY, TAG_INIT_VALUE,
    TAG_RANDOM_REWARD,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trajectories per rollout / gradient chunk. Fixed so that results never
/// depend on how many workers process the chunks.
pub const CHUNK: usize = 25;

pub const METRICS_HEADER: &str = "epoch,mean_logpd,mean_pd,k_current,mean_entropy,mean_return,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const POLICY_CKPT: &str = "policy.ckpt";
pub const VALUE_CKPT: &str = "value.ckpt";
pub const DECODER_CKPT: &str = "decoder.ckpt";

fn chunks(n: usize) -> Vec<Range<usize>> {
    (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect()
}

/// `-(1/N) sum_{i,t} A_it log pi(a_it | s_it, c_i) - (beta/N) sum_{i,t} H_it`
/// over the given trajectories, where `N = normalizer` is the number of
/// action steps in the whole batch. Advantages enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss(
    tape: &mut Tape,
    policy: &Policy,
    store: &ParamStore,
    trajs: &[&Trajectory],
    advantages: &[&[f64]],
    beta: f64,
    k: usize,
    normalizer: f64,
) -> Result<Var> {
    if trajs.len() != advantages.len() {
        return Err(Error::Batch(format!(
            "{} advantage rows for {} trajectories",
            advantages.len(),
            trajs.len()
        )));
    }
    if let Some(i) = (0..trajs.len()).find(|&i| advantages[i].len() != trajs[i].horizon()) {
        return Err(Error::Batch(format!(
            "trajectory {i}: advantage length differs from horizon"
        )));
    }
    let scored = policy.score(tape, store, trajs, k)?;
    let mut total: Option<Var> = None;
    let b = trajs.len();
    for (t, (lp, ent)) in scored.logps.iter().zip(&scored.entropies).enumerate() {
        let w = Tensor::matrix(b, 1, advantages.iter().map(|a| -a[t] / normalizer).collect());
        let mut term = tape.weighted_sum(*lp, w)?;
        if beta != 0.0 {
            let e = tape.weighted_sum(*ent, Tensor::filled(&[b, 1], -beta / normalizer))?;
            term = tape.add(term, e)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or(Error::EmptySequence("policy loss"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyStepInfo {
    /// Loss before the update.
    pub loss: f64,
}

/// One Adam step on [`policy_loss`] over the whole batch. Gradients are
/// computed per fixed-size chunk (in parallel when available) and summed
/// in chunk order.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient_step(
    policy: &Policy,
    store: &mut ParamStore,
    trajs: &[Trajectory],
    advantages: &[Vec<f64>],
    beta: f64,
    k: usize,
    opt: &Adam,
    exec: &Executor,
) -> Result<PolicyStepInfo> {
    if trajs.is_empty() {
        return Err(Error::Batch("empty policy batch".into()));
    }
    if advantages.iter().flatten().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("advantages".into()));
    }
    let steps: usize = trajs.iter().map(Trajectory::horizon).sum();
    if steps == 0 {
        return Ok(PolicyStepInfo { loss: 0.0 });
    }
    let normalizer = steps as f64;
    let frozen: &ParamStore = store;
    let parts = exec.map(&chunks(trajs.len()), |r| -> Result<(f64, Vec<(String, Tensor)>)> {
        let mut tape = Tape::new();
        let tr: Vec<&Trajectory> = trajs[r.clone()].iter().collect();
        let adv: Vec<&[f64]> = advantages[r.clone()].iter().map(Vec::as_slice).collect();
        let loss = policy_loss(&mut tape, policy, frozen, &tr, &adv, beta, k, normalizer)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((value, grads.params().map(|(n, g)| (n.to_string(), g.clone())).collect()))
    });
    let mut loss = 0.0;
    for part in parts {
        let (v, grads) = part?;
        loss += v;
        for (name, g) in grads {
            store.accumulate_grad(&name, &g)?;
        }
    }
    if !loss.is_finite() {
        store.zero_grads();
        return Err(Error::NonFinite("policy loss".into()));
    }
    opt.step(store)?;
    Ok(PolicyStepInfo { loss })
}

/// Value-network inputs `concat(s_t, encoding(c))` for every action step,
/// trajectory-major.
pub fn value_inputs(trajs: &[Trajectory], encodings: &Tensor) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, tr) in trajs.iter().enumerate() {
        for s in &tr.states[..tr.horizon()] {
            let mut row = s.clone();
            row.extend_from_slice(encodings.row(i));
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptySequence("value inputs"));
    }
    Tensor::from_rows(&rows)
}

/// Value predictions for every row of `inputs`.
pub fn value_predictions(value: &ValueNet, store: &ParamStore, inputs: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone());
    let v = value.forward(&mut tape, store, x)?;
    Ok(tape.value(v).data().to_vec())
}

/// One Adam step on the mean squared error; returns the pre-update MSE.
pub fn value_update(
    value: &ValueNet,
    store: &mut ParamStore,
    inputs: &Tensor,
    targets: &[f64],
    opt: &Adam,
) -> Result<f64> {
    if inputs.rows() != targets.len() {
        return Err(Error::Batch(format!(
            "{} value inputs for {} targets",
            inputs.rows(),
            targets.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone());
    let v = value.forward(&mut tape, store, x)?;
    let y = tape.constant(Tensor::matrix(targets.len(), 1, targets.to_vec()));
    let d = tape.sub(v, y)?;
    let sq = tape.mul(d, d)?;
    let loss = tape.mean(sq);
    let mse = tape.value(loss).item();
    if !mse.is_finite() {
        return Err(Error::NonFinite("value loss".into()));
    }
    tape.backward(loss)?.accumulate_into(store)?;
    opt.step(store)?;
    Ok(mse)
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Batch mean of `log P_D(c | tau)` (NaN without a decoder).
    pub mean_logpd: f64,
    /// Batch mean of `P_D(c | tau)`; for DIAYN the per-state geometric
    /// mean `exp(log P_D / (T + 1))` (NaN without a decoder).
    pub mean_pd: f64,
    /// Number of active contexts while the epoch was sampled.
    pub k_current: usize,
    pub mean_entropy: f64,
    /// Mean undiscounted sum of the rewards entering the return term.
    pub mean_return: f64,
    pub wall_ms: u64,
}

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        x.to_string()
    }
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            fmt_f64(self.mean_logpd),
            fmt_f64(self.mean_pd),
            self.k_current,
            fmt_f64(self.mean_entropy),
            fmt_f64(self.mean_return),
            self.wall_ms
        )
    }

    fn non_finite(&self, has_decoder: bool) -> Option<&'static str> {
        if has_decoder && !self.mean_logpd.is_finite() {
            Some("mean_logpd")
        } else if has_decoder && !self.mean_pd.is_finite() {
            Some("mean_pd")
        } else if !self.mean_entropy.is_finite() {
            Some("mean_entropy")
        } else if !self.mean_return.is_finite() {
            Some("mean_return")
        } else {
            None
        }
    }
}

/// Parse a `metrics.csv` body (header checked) back into rows.
pub fn read_metrics(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config("metrics file has an unexpected header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad metric value `{s}`"))) };
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Config(format!("metrics row `{l}` has {} fields", f.len())));
            }
            Ok(EpochMetrics {
                epoch: num(f[0])? as usize,
                mean_logpd: num(f[1])?,
                mean_pd: num(f[2])?,
                k_current: num(f[3])? as usize,
                mean_entropy: num(f[4])?,
                mean_return: num(f[5])?,
                wall_ms: num(f[6])? as u64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub algo: String,
    pub seed: u64,
    pub epochs_completed: usize,
    /// Active contexts after the final curriculum update.
    pub k_current: usize,
    pub k_max: usize,
    /// First epoch with `mean_pd >= threshold` while `K = K_max`.
    pub mastered_epoch: Option<usize>,
    pub final_mean_pd: Option<f64>,
    pub stopped_at_mastery: bool,
}

/// All learnable state of a run.
pub struct Trainer {
    pub config: TrainerConfig,
    pub env: EnvConfig,
    pub policy: Policy,
    pub policy_store: ParamStore,
    pub value: ValueNet,
    pub value_store: ParamStore,
    pub decoder: Option<(Decoder, ParamStore)>,
    pub random_reward: Option<RandomRewardSpec>,
    pub curriculum: CurriculumState,
    pub opt: Adam,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let env = config.env_config();
        let spec = env.spec();
        let k_max = config.contexts.k_max();
        let encoding = config
            .embed_dim
            .map_or(ContextEncoding::OneHot, |dim| ContextEncoding::Embedding { dim });
        let policy = Policy::new(PolicyConfig::for_env(&spec, encoding, k_max))?;
        let mut policy_store = ParamStore::new();
        policy.init(&mut policy_store, &mut rng_from(config.seed, &[TAG_INIT_POLICY]));
        let value = ValueNet::new(spec.obs_dim + policy.encoding_width());
        let mut value_store = ParamStore::new();
        value.init(&mut value_store, &mut rng_from(config.seed, &[TAG_INIT_VALUE]));
        let decoder = match config.algo.decoder() {
            Some(kind) => {
                let d = Decoder::new(kind, spec.obs_dim, k_max)?;
                let mut s = ParamStore::new();
                d.init(&mut s, &mut rng_from(config.seed, &[TAG_INIT_DECODER]));
                Some((d, s))
            }
            None => None,
        };
        let random_reward = (config.algo == Algo::RandomReward)
            .then(|| RandomRewardSpec::generate(k_max, spec.obs_dim, &mut rng_from(config.seed, &[TAG_RANDOM_REWARD])));
        Ok(Trainer {
            curriculum: CurriculumState::new(config.contexts.k_initial(), k_max),
            opt: Adam::with_lr(config.lr),
            config,
            env,
            policy,
            policy_store,
            value,
            value_store,
            decoder,
            random_reward,
        })
    }

    /// Contexts and per-episode seeds for an epoch.
    pub fn epoch_plan(&self, epoch: usize) -> (Vec<usize>, Vec<u64>) {
        let k = self.curriculum.k_current;
        let n = self.config.paths_per_epoch;
        let mut rng = rng_from(self.config.seed, &[TAG_CONTEXTS, epoch as u64]);
        let contexts = (0..n).map(|_| sample_context(k, &mut rng)).collect();
        let seeds = (0..n)
            .map(|i| derive_seed(self.config.seed, &[TAG_EPISODE, epoch as u64, i as u64]))
            .collect();
        (contexts, seeds)
    }

    /// Stochastic rollouts for the given contexts, chunked across workers.
    pub fn sample(&self, contexts: &[usize], seeds: &[u64], exec: &Executor) -> Result<Vec<Trajectory>> {
        let k = self.curriculum.k_current;
        let ctx: Vec<ContextInput> = contexts.iter().map(|&c| ContextInput::Id(c)).collect();
        let parts = exec.map(&chunks(contexts.len()), |r| {
            self.policy.rollout_batch(
                &self.policy_store,
                &self.env,
                &ctx[r.clone()],
                &seeds[r.clone()],
                k,
                ActionMode::Stochastic,
            )
        });
        let mut out = Vec::with_capacity(contexts.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Decoder scores for a batch, chunked across workers.
    pub fn score(&self, trajs: &[Trajectory], exec: &Executor) -> Result<Vec<TrajectoryScore>> {
        let Some((decoder, store)) = &self.decoder else {
            return Ok(Vec::new());
        };
        let k = self.curriculum.k_current;
        let parts = exec.map(&chunks(trajs.len()), |r| {
            let refs: Vec<&Trajectory> = trajs[r.clone()].iter().collect();
            decoder.score_batch(store, &refs, k)
        });
        let mut out = Vec::with_capacity(trajs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn advantage_form(&self) -> AdvantageForm {
        match self.decoder.as_ref().map(|(d, _)| d.kind) {
            None => AdvantageForm::ReturnOnly,
            Some(DecoderKind::Diayn) => AdvantageForm::PerStateDecoder,
            Some(_) => AdvantageForm::TrajectoryDecoder,
        }
    }

    /// Run one epoch (1-based number) and apply all three updates.
    pub fn run_epoch(&mut self, epoch: usize, exec: &Executor) -> Result<EpochMetrics> {
        let start = Instant::now();
        let k = self.curriculum.k_current;
        let (contexts, seeds) = self.epoch_plan(epoch);
        let mut trajs = self.sample(&contexts, &seeds, exec)?;
        if let Some(spec) = &self.random_reward {
            for tr in &mut trajs {
                for t in 0..tr.horizon() {
                    tr.rewards[t] += spec.reward(&tr.states[t + 1], tr.context_id)?;
                }
            }
        }
        let scores = self.score(&trajs, exec)?;

        let ids: Vec<ContextInput> = contexts.iter().map(|&c| ContextInput::Id(c)).collect();
        let enc = self.policy.context_values(&self.policy_store, &ids, k)?;
        let v_in = value_inputs(&trajs, &enc)?;
        let flat_values = value_predictions(&self.value, &self.value_store, &v_in)?;
        let mut it = flat_values.into_iter();
        let values: Vec<Vec<f64>> = trajs.iter().map(|t| it.by_ref().take(t.horizon()).collect()).collect();
        let adv = compute_advantages(&trajs, &scores, &values, self.advantage_form(), self.config.gamma)?;

        policy_gradient_step(
            &self.policy,
            &mut self.policy_store,
            &trajs,
            &adv.advantages,
            self.config.beta,
            k,
            &self.opt,
            exec,
        )?;
        let targets: Vec<f64> = adv.value_targets.iter().flatten().copied().collect();
        value_update(&self.value, &mut self.value_store, &v_in, &targets, &self.opt)?;
        if let Some((decoder, store)) = &mut self.decoder {
            let refs: Vec<&Trajectory> = trajs.iter().collect();
            decoder.supervised_update(store, &refs, k, &self.opt)?;
        }

        let n = trajs.len() as f64;
        let (mean_logpd, mean_pd) = if scores.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let per_state = self.advantage_form() == AdvantageForm::PerStateDecoder;
            let lp = scores.iter().map(|s| s.chosen_logp).sum::<f64>() / n;
            let pd = scores
                .iter()
                .zip(&trajs)
                .map(|(s, t)| {
                    if per_state {
                        (s.chosen_logp / t.states.len() as f64).exp()
                    } else {
                        s.chosen_logp.exp()
                    }
                })
                .sum::<f64>()
                / n;
            (lp, pd)
        };
        let steps: usize = trajs.iter().map(Trajectory::horizon).sum();
        let mean_entropy = trajs.iter().flat_map(|t| t.entropies.iter()).sum::<f64>() / steps.max(1) as f64;
        let mean_return = trajs.iter().map(|t| t.rewards.iter().sum::<f64>()).sum::<f64>() / n;
        let metrics = EpochMetrics {
            epoch,
            mean_logpd,
            mean_pd,
            k_current: k,
            mean_entropy,
            mean_return,
            wall_ms: if self.config.wall_clock {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if let Some(what) = metrics.non_finite(self.decoder.is_some()) {
            return Err(Error::NonFinite(what.into()));
        }
        if self.config.contexts.is_curriculum() {
            self.curriculum.mastery_stat = mean_pd;
            self.curriculum.update(self.config.threshold);
        }
        Ok(metrics)
    }

    pub fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        self.policy_store.save(&dir.join(POLICY_CKPT))?;
        self.value_store.save(&dir.join(VALUE_CKPT))?;
        if let Some((_, s)) = &self.decoder {
            s.save(&dir.join(DECODER_CKPT))?;
        }
        Ok(())
    }

    /// Rebuild a trained run from its directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
        let mut t = Trainer::new(TrainerConfig::parse(&text)?)?;
        t.policy_store = ParamStore::load(&dir.join(POLICY_CKPT))?;
        t.value_store = ParamStore::load(&dir.join(VALUE_CKPT))?;
        if let Some((_, s)) = &mut t.decoder {
            *s = ParamStore::load(&dir.join(DECODER_CKPT))?;
        }
        let summary: TrainSummary = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
        t.curriculum.k_current = summary.k_current;
        Ok(t)
    }

    fn summary(
        &self,
        epochs_completed: usize,
        mastered_epoch: Option<usize>,
        last: Option<&EpochMetrics>,
        stopped: bool,
    ) -> TrainSummary {
        TrainSummary {
            algo: self.config.algo.name().into(),
            seed: self.config.seed,
            epochs_completed,
            k_current: self.curriculum.k_current,
            k_max: self.curriculum.k_max,
            mastered_epoch,
            final_mean_pd: last.map(|m| m.mean_pd).filter(|x| x.is_finite()),
            stopped_at_mastery: stopped,
        }
    }
}

/// Paths of the files a finished run wrote.
pub fn run_artifacts(dir: &Path, has_decoder: bool) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = [CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, POLICY_CKPT, VALUE_CKPT]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    if has_decoder {
        v.push(dir.join(DECODER_CKPT));
    }
    v
}

fn write_summary(dir: &Path, s: &TrainSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(s)?;
    text.push('\n');
    fs::write(dir.join(SUMMARY_FILE), text)?;
    Ok(())
}

/// Train from scratch, writing every artifact into `out_dir`. `on_epoch`
/// sees each metrics row as it is written.
pub fn train(
    config: &TrainerConfig,
    out_dir: &Path,
    exec: &Executor,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(config.clone())?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), config.to_flat())?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;

    let k_max = config.contexts.k_max();
    let mut mastered = None;
    let mut last: Option<EpochMetrics> = None;
    let mut completed = 0;
    let mut stopped = false;
    for epoch in 1..=config.epochs {
        let row = match trainer.run_epoch(epoch, exec) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                metrics.flush()?;
                trainer.save_checkpoints(out_dir)?;
                write_summary(out_dir, &trainer.summary(completed, mastered, last.as_ref(), false))?;
                return Err(Error::Numerical {
                    epoch,
                    detail: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        };
        writeln!(metrics, "{}", row.csv_row())?;
        metrics.flush()?;
        on_epoch(&row);
        completed = epoch;
        let at_mastery = row.k_current == k_max && row.mean_pd >= config.threshold;
        if at_mastery && mastered.is_none() {
            mastered = Some(epoch);
        }
        last = Some(row);
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            trainer.save_checkpoints(out_dir)?;
        }
        if at_mastery && config.stop_at_mastery {
            stopped = true;
            break;
        }
    }
    trainer.save_checkpoints(out_dir)?;
    let summary = trainer.summary(completed, mastered, last.as_ref(), stopped);
    write_summary(out_dir, &summary)?;
    Ok(summary)
}
