//! The named finite-difference cases behind `optdisc gradcheck`: every
//! layer plus the composite policy-gradient/entropy loss and the decoder
//! negative log-likelihoods, each on small fixed random inputs.

use std::time::{Duration, Instant};

use rand::RngExt;

use crate::decoders::{Decoder, DecoderKind};
use crate::envs::{EnumerableMdp, EnvConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check_with, GradCheckReport};
use crate::nn::{Activation, BiLstm, Embedding, Linear, Lstm, Mlp};
use crate::par::Executor;
use crate::params::ParamStore;
use crate::policy::{
    ActionDist, ActionMode, ContextEncoding, ContextInput, Policy, PolicyConfig, Trajectory, ValueNet,
};
use crate::rng::{rng_from, Rng};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::policy_loss;

/// Pass threshold on the worst relative error of a case.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

pub const CASE_NAMES: &[&str] = &[
    "linear",
    "mlp",
    "lstm",
    "bilstm",
    "embedding",
    "log_softmax",
    "gaussian_logprob",
    "gaussian_entropy",
    "categorical_entropy",
    "value_mse",
    "policy_loss_gaussian",
    "policy_loss_categorical",
    "decoder_valor_nll",
    "decoder_valor_states_nll",
    "decoder_vic_nll",
    "decoder_diayn_nll",
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < GRAD_TOLERANCE
    }
}

fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

fn rand_states(rng: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Reduce any output to a scalar with fixed random weights, so every
/// output element contributes a distinct gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = {
        let t = tape.value(v);
        (t.rows(), t.cols())
    };
    let w = rand_tensor(&mut rng_from(seed, &[99]), r, c);
    tape.weighted_sum(v, w)
}

fn fake_traj(states: Vec<Vec<f64>>, context_id: usize) -> Trajectory {
    let t = states.len() - 1;
    Trajectory {
        context_id,
        actions: vec![vec![0.0]; t],
        logps: vec![0.0; t],
        rewards: vec![0.0; t],
        entropies: vec![0.0; t],
        states,
    }
}

fn check<F>(
    name: &'static str,
    store: &ParamStore,
    corrupt: Option<OpKind>,
    exec: &Executor,
    f: F,
) -> Result<CaseResult>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    let start = Instant::now();
    let report = grad_check_with(f, store, FD_STEP, corrupt, exec)?;
    Ok(CaseResult {
        name,
        report,
        elapsed: start.elapsed(),
    })
}

fn micro_policy(encoding: ContextEncoding, env: &EnvConfig) -> Result<(Policy, ParamStore)> {
    let mut cfg = PolicyConfig::for_env(&env.spec(), encoding, 3);
    cfg.lstm_size = 5;
    cfg.mlp_size = 4;
    cfg.init_log_std = -0.3;
    let p = Policy::new(cfg)?;
    let mut s = ParamStore::new();
    p.init(&mut s, &mut rng_from(21, &[]));
    Ok((p, s))
}

fn policy_case(
    name: &'static str,
    env: EnvConfig,
    encoding: ContextEncoding,
    corrupt: Option<OpKind>,
    exec: &Executor,
) -> Result<CaseResult> {
    let (p, s) = micro_policy(encoding, &env)?;
    let trajs = p.rollout_batch(
        &s,
        &env,
        &[ContextInput::Id(0), ContextInput::Id(2)],
        &[5, 6],
        3,
        ActionMode::Stochastic,
    )?;
    let mut rng = rng_from(22, &[]);
    let adv: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| (0..t.horizon()).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let steps = trajs.iter().map(Trajectory::horizon).sum::<usize>() as f64;
    check(name, &s, corrupt, exec, |tape, st| {
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let a: Vec<&[f64]> = adv.iter().map(Vec::as_slice).collect();
        policy_loss(tape, &p, st, &refs, &a, 0.1, 3, steps)
    })
}

fn decoder_case(name: &'static str, kind: DecoderKind, corrupt: Option<OpKind>, exec: &Executor) -> Result<CaseResult> {
    let d = match kind {
        DecoderKind::Valor | DecoderKind::ValorStates => Decoder::recurrent(kind, 4, 3, 4)?,
        _ => Decoder::feedforward(kind, 4, 3, &[6, 6])?,
    };
    let mut s = ParamStore::new();
    d.init(&mut s, &mut rng_from(31, &[]));
    let mut rng = rng_from(32, &[]);
    let trajs: Vec<Trajectory> = (0..3).map(|c| fake_traj(rand_states(&mut rng, 14, 4), c)).collect();
    check(name, &s, corrupt, exec, |tape, st| {
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        d.nll(tape, st, &refs, 3)
    })
}

/// Run one named case.
pub fn run_case(name: &str, corrupt: Option<OpKind>, exec: &Executor) -> Result<CaseResult> {
    let mut rng = rng_from(7, &[name.len() as u64]);
    let x = rand_tensor(&mut rng, 5, 3);
    match name {
        "linear" => {
            let l = Linear::new("lin", 3, 4);
            let mut s = ParamStore::new();
            l.init(&mut s, &mut rng);
            check("linear", &s, corrupt, exec, |t, st| {
                let xi = t.constant(x.clone());
                let y = l.forward(t, st, xi)?;
                project(t, y, 1)
            })
        }
        "mlp" => {
            let m = Mlp::new("mlp", &[3, 5, 4], Activation::Tanh);
            let mut s = ParamStore::new();
            m.init(&mut s, &mut rng);
            check("mlp", &s, corrupt, exec, |t, st| {
                let xi = t.constant(x.clone());
                let y = m.forward(t, st, xi)?;
                project(t, y, 2)
            })
        }
        "lstm" => {
            let l = Lstm::new("lstm", 3, 4);
            let mut s = ParamStore::new();
            l.init(&mut s, &mut rng);
            let xs: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, 2, 3)).collect();
            check("lstm", &s, corrupt, exec, |t, st| {
                let inputs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let init = l.zero_state(t, 2);
                let out = *l.forward(t, st, &inputs, init)?.last().expect("non-empty sequence");
                let h = project(t, out.h, 3)?;
                let c = project(t, out.c, 4)?;
                t.add(h, c)
            })
        }
        "bilstm" => {
            let b = BiLstm::new("bi", 3, 4);
            let mut s = ParamStore::new();
            b.init(&mut s, &mut rng);
            let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 2, 3)).collect();
            check("bilstm", &s, corrupt, exec, |t, st| {
                let inputs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let h = b.run(t, st, &inputs)?;
                project(t, h, 5)
            })
        }
        "embedding" => {
            let e = Embedding::new("emb", 5, 3);
            let mut s = ParamStore::new();
            e.init(&mut s, &mut rng);
            check("embedding", &s, corrupt, exec, |t, st| {
                let rows = e.lookup(t, st, &[0, 2, 2, 4])?;
                let y = t.tanh(rows);
                project(t, y, 6)
            })
        }
        "log_softmax" => {
            let mut s = ParamStore::new();
            s.insert("logits", rand_tensor(&mut rng, 3, 4));
            check("log_softmax", &s, corrupt, exec, |t, st| {
                let z = t.param(st, "logits")?;
                let lp = t.log_softmax(z)?;
                let picked = t.pick_cols(lp, &[1, 3, 0])?;
                Ok(t.sum(picked))
            })
        }
        "gaussian_logprob" => {
            let mut s = ParamStore::new();
            s.insert("mean", rand_tensor(&mut rng, 3, 2));
            s.insert("log_std", Tensor::vector(vec![-0.2, 0.3]));
            let a = rand_tensor(&mut rng, 3, 2);
            check("gaussian_logprob", &s, corrupt, exec, |t, st| {
                let m = t.param(st, "mean")?;
                let ls = t.param(st, "log_std")?;
                let lp = t.gaussian_logprob(m, ls, a.clone())?;
                project(t, lp, 7)
            })
        }
        "gaussian_entropy" | "categorical_entropy" => {
            let gaussian = name == "gaussian_entropy";
            let mut s = ParamStore::new();
            s.insert("mean", rand_tensor(&mut rng, 3, 2));
            s.insert("log_std", Tensor::vector(vec![-0.2, 0.3]));
            s.insert("logits", rand_tensor(&mut rng, 3, 4));
            let case = if gaussian {
                "gaussian_entropy"
            } else {
                "categorical_entropy"
            };
            check(case, &s, corrupt, exec, |t, st| {
                let dist = if gaussian {
                    ActionDist::Gaussian {
                        mean: t.param(st, "mean")?,
                        log_std: t.param(st, "log_std")?,
                    }
                } else {
                    let z = t.param(st, "logits")?;
                    ActionDist::Categorical {
                        log_probs: t.log_softmax(z)?,
                    }
                };
                let h = dist.entropy(t)?;
                project(t, h, 8)
            })
        }
        "value_mse" => {
            let v = ValueNet::with_sizes(3, &[5]);
            let mut s = ParamStore::new();
            v.init(&mut s, &mut rng);
            let y = rand_tensor(&mut rng, 5, 1);
            check("value_mse", &s, corrupt, exec, |t, st| {
                let xi = t.constant(x.clone());
                let pred = v.forward(t, st, xi)?;
                let yi = t.constant(y.clone());
                let d = t.sub(pred, yi)?;
                let sq = t.mul(d, d)?;
                Ok(t.mean(sq))
            })
        }
        "policy_loss_gaussian" => policy_case(
            "policy_loss_gaussian",
            EnvConfig::Point {
                horizon: 4,
                wall_penalty: 0.0,
            },
            ContextEncoding::Embedding { dim: 3 },
            corrupt,
            exec,
        ),
        "policy_loss_categorical" => policy_case(
            "policy_loss_categorical",
            EnvConfig::Chain(EnumerableMdp::line(3, 4)),
            ContextEncoding::OneHot,
            corrupt,
            exec,
        ),
        "decoder_valor_nll" => decoder_case("decoder_valor_nll", DecoderKind::Valor, corrupt, exec),
        "decoder_valor_states_nll" => decoder_case("decoder_valor_states_nll", DecoderKind::ValorStates, corrupt, exec),
        "decoder_vic_nll" => decoder_case("decoder_vic_nll", DecoderKind::Vic, corrupt, exec),
        "decoder_diayn_nll" => decoder_case("decoder_diayn_nll", DecoderKind::Diayn, corrupt, exec),
        other => Err(crate::error::Error::Config(format!("unknown gradient case `{other}`"))),
    }
}

/// Run every case whose name contains `filter` (all cases when `None`).
pub fn run_suite(filter: Option<&str>, corrupt: Option<OpKind>, exec: &Executor) -> Result<Vec<CaseResult>> {
    CASE_NAMES
        .iter()
        .filter(|n| filter.is_none_or(|f| n.contains(f)))
        .map(|n| run_case(n, corrupt, exec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let results = run_suite(None, None, &Executor::sequential()).unwrap();
        assert_eq!(results.len(), CASE_NAMES.len());
        for r in &results {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
            assert!(r.report.checked > 0);
        }
    }

    #[test]
    fn filter_restricts_scope() {
        let names: Vec<&str> = run_suite(Some("lstm"), None, &Executor::sequential())
            .unwrap()
            .iter()
            .map(|r| r.name)
            .collect();
        assert_eq!(names, vec!["lstm", "bilstm"]);
    }

    #[test]
    fn corrupted_rules_are_caught() {
        for (kind, case) in [
            (OpKind::Tanh, "mlp"),
            (OpKind::Sigmoid, "lstm"),
            (OpKind::LogSoftmax, "decoder_vic_nll"),
        ] {
            let r = run_case(case, Some(kind), &Executor::sequential()).unwrap();
            assert!(!r.passed(), "{case} with corrupted {kind:?}: {:?}", r.report);
        }
    }
}
