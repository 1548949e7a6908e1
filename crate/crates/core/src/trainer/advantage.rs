//! Discounted returns, batch normalization and advantage construction.

use crate::decoders::TrajectoryScore;
use crate::error::{Error, Result};
use crate::policy::Trajectory;

pub const NORMALIZE_EPS: f64 = 1e-8;

/// `(x - mean) / (std + eps)` with the population standard deviation. A
/// constant batch maps to all zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.iter().all(|&v| v == values[0]) {
        return vec![0.0; values.len()];
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + NORMALIZE_EPS;
    values.iter().map(|v| (v - mean) / denom).collect()
}

/// `R_t = sum_{t' >= t} gamma^(t' - t) r_t'` by backward recursion.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// Which form of the advantage to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvantageForm {
    /// `normalize(log P_D(c|tau)) + normalize(R_t - V)`; the decoder term
    /// is broadcast over every timestep of its trajectory.
    TrajectoryDecoder,
    /// `normalize(sum gamma^(t'-t) (log P_D(c|s_t') + r_t') - V)`, where
    /// the sum runs over all `T + 1` visited states.
    PerStateDecoder,
    /// `normalize(R_t - V)`; no decoder (random-reward baseline).
    ReturnOnly,
}

/// Per-trajectory, per-timestep quantities (one entry per action).
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<Vec<f64>>,
    /// Normalized decoder term (empty rows unless `TrajectoryDecoder`).
    pub decoder_term: Vec<Vec<f64>>,
    /// Normalized return residual.
    pub return_term: Vec<Vec<f64>>,
    /// Regression targets for the value network.
    pub value_targets: Vec<Vec<f64>>,
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn unflatten(flat: Vec<f64>, like: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut it = flat.into_iter();
    like.iter().map(|r| it.by_ref().take(r.len()).collect()).collect()
}

/// Build advantages. `values[i][t]` is `V(s_t, c_i)` for every action step
/// `t`; `scores` must be aligned with `trajs` unless the form is
/// `ReturnOnly`.
pub fn compute_advantages(
    trajs: &[Trajectory],
    scores: &[TrajectoryScore],
    values: &[Vec<f64>],
    form: AdvantageForm,
    gamma: f64,
) -> Result<AdvantageBatch> {
    if values.len() != trajs.len() {
        return Err(Error::Batch(format!(
            "{} value rows for {} trajectories",
            values.len(),
            trajs.len()
        )));
    }
    if form != AdvantageForm::ReturnOnly && scores.len() != trajs.len() {
        return Err(Error::Batch(format!(
            "{} decoder outputs for {} trajectories",
            scores.len(),
            trajs.len()
        )));
    }
    for (i, (t, v)) in trajs.iter().zip(values).enumerate() {
        if t.rewards.len() != t.horizon() || v.len() != t.horizon() {
            return Err(Error::Batch(format!(
                "trajectory {i}: reward/value length differs from horizon"
            )));
        }
        if form == AdvantageForm::PerStateDecoder && scores[i].per_state.len() != t.states.len() {
            return Err(Error::Batch(format!(
                "trajectory {i}: per-state decoder output has wrong length"
            )));
        }
    }

    let value_targets: Vec<Vec<f64>> = match form {
        AdvantageForm::PerStateDecoder => trajs
            .iter()
            .zip(scores)
            .map(|(t, s)| {
                let mut r: Vec<f64> = s.per_state.clone();
                for (x, rew) in r.iter_mut().zip(&t.rewards) {
                    *x += rew;
                }
                let mut g = discounted_returns(&r, gamma);
                g.truncate(t.horizon());
                g
            })
            .collect(),
        _ => trajs.iter().map(|t| discounted_returns(&t.rewards, gamma)).collect(),
    };

    let residual: Vec<Vec<f64>> = value_targets
        .iter()
        .zip(values)
        .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a - b).collect())
        .collect();
    let return_term = unflatten(normalize(&flatten(&residual)), &residual);

    let decoder_term = match form {
        AdvantageForm::TrajectoryDecoder => {
            let broadcast: Vec<Vec<f64>> = trajs
                .iter()
                .zip(scores)
                .map(|(t, s)| vec![s.chosen_logp; t.horizon()])
                .collect();
            unflatten(normalize(&flatten(&broadcast)), &broadcast)
        }
        _ => trajs.iter().map(|_| Vec::new()).collect(),
    };

    let advantages = if form == AdvantageForm::TrajectoryDecoder {
        return_term
            .iter()
            .zip(&decoder_term)
            .map(|(r, d)| r.iter().zip(d).map(|(a, b)| a + b).collect())
            .collect()
    } else {
        return_term.clone()
    };
    if advantages.iter().flatten().any(|a: &f64| !a.is_finite()) {
        return Err(Error::NonFinite("advantages".into()));
    }
    Ok(AdvantageBatch {
        advantages,
        decoder_term,
        return_term,
        value_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(t: usize, rewards: Vec<f64>, ctx: usize) -> Trajectory {
        Trajectory {
            context_id: ctx,
            states: vec![vec![0.0]; t + 1],
            actions: vec![vec![0.0]; t],
            logps: vec![0.0; t],
            rewards,
            entropies: vec![0.0; t],
        }
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&[1.0, 2.0, 3.0]);
        let s = 1.5f64.sqrt();
        assert!((n[0] + s).abs() < 1e-7 && n[1].abs() < 1e-15 && (n[2] - s).abs() < 1e-7);
        assert_eq!(normalize(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
    }

    #[test]
    fn returns_examples() {
        let r = discounted_returns(&[0.0, 0.0, 1.0], 0.97);
        assert!((r[0] - 0.9409).abs() < 1e-15 && (r[1] - 0.97).abs() < 1e-15 && r[2] == 1.0);
        assert_eq!(discounted_returns(&[1.0; 5], 1.0), vec![5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn returns_match_quadratic_sum() {
        use rand::{RngExt, SeedableRng};
        let mut rng = crate::rng::Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fast = discounted_returns(&r, 0.97);
        for t in 0..20 {
            let slow: f64 = (t..20).map(|u| 0.97f64.powi((u - t) as i32) * r[u]).sum();
            assert!((fast[t] - slow).abs() < 1e-12);
        }
    }

    // Straight transcription of the two advantage formulas, written
    // without the shared helpers above.
    fn oracle(
        trajs: &[Trajectory],
        scores: &[TrajectoryScore],
        values: &[Vec<f64>],
        per_state: bool,
        g: f64,
    ) -> Vec<Vec<f64>> {
        fn norm(x: &[f64]) -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
            x.iter().map(|v| (v - m) / (sd + 1e-8)).collect()
        }
        let mut resid = Vec::new();
        let mut dec = Vec::new();
        for (i, tr) in trajs.iter().enumerate() {
            let t_max = tr.rewards.len();
            for t in 0..t_max {
                let mut ret = 0.0;
                if per_state {
                    for u in t..=t_max {
                        let r = if u < t_max { tr.rewards[u] } else { 0.0 };
                        ret += g.powi((u - t) as i32) * (scores[i].per_state[u] + r);
                    }
                } else {
                    for u in t..t_max {
                        ret += g.powi((u - t) as i32) * tr.rewards[u];
                    }
                }
                resid.push(ret - values[i][t]);
                dec.push(scores[i].chosen_logp);
            }
        }
        let a = norm(&resid);
        let flat: Vec<f64> = if per_state {
            a
        } else {
            let d = norm(&dec);
            a.iter().zip(&d).map(|(x, y)| x + y).collect()
        };
        let mut it = flat.into_iter();
        trajs
            .iter()
            .map(|t| it.by_ref().take(t.rewards.len()).collect())
            .collect()
    }

    fn toy() -> (Vec<Trajectory>, Vec<TrajectoryScore>, Vec<Vec<f64>>) {
        let trajs = vec![
            traj(3, vec![0.1, -0.2, 0.3], 0),
            traj(3, vec![0.0, 0.5, 0.0], 1),
            traj(3, vec![1.0, 0.0, -1.0], 2),
        ];
        let scores = vec![
            TrajectoryScore {
                chosen_logp: -0.3,
                per_state: vec![-0.1, -0.2, -0.3, -0.4],
            },
            TrajectoryScore {
                chosen_logp: -1.7,
                per_state: vec![-1.0, -0.5, -0.9, -0.2],
            },
            TrajectoryScore {
                chosen_logp: -0.9,
                per_state: vec![-0.6, -0.6, -0.1, -2.0],
            },
        ];
        let values = vec![vec![0.2, 0.1, 0.0], vec![-0.1, 0.4, 0.3], vec![0.0, 0.0, 0.5]];
        (trajs, scores, values)
    }

    #[test]
    fn both_forms_match_oracle() {
        let (trajs, scores, values) = toy();
        for (form, per_state) in [
            (AdvantageForm::TrajectoryDecoder, false),
            (AdvantageForm::PerStateDecoder, true),
        ] {
            let got = compute_advantages(&trajs, &scores, &values, form, 0.97)
                .unwrap()
                .advantages;
            let want = oracle(&trajs, &scores, &values, per_state, 0.97);
            for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((g - w).abs() < 1e-12, "{form:?}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn per_state_uniform_decoder_geometric_series() {
        let (k, t_len, g) = (4usize, 6usize, 0.97f64);
        let trajs = vec![traj(t_len, vec![0.0; t_len], 0)];
        let lnk = (k as f64).ln();
        let scores = vec![TrajectoryScore {
            chosen_logp: -lnk * 7.0,
            per_state: vec![-lnk; t_len + 1],
        }];
        let b = compute_advantages(&trajs, &scores, &[vec![0.0; t_len]], AdvantageForm::PerStateDecoder, g).unwrap();
        for t in 0..t_len {
            let closed = -lnk * (1.0 - g.powi((t_len - t + 1) as i32)) / (1.0 - g);
            assert!((b.value_targets[0][t] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_decoder_term_is_shared_within_trajectory() {
        let trajs: Vec<Trajectory> = (0..3).map(|i| traj(5, vec![0.0; 5], i)).collect();
        let scores: Vec<TrajectoryScore> = [-0.1, -0.5, -2.0]
            .iter()
            .map(|&c| TrajectoryScore {
                chosen_logp: c,
                per_state: Vec::new(),
            })
            .collect();
        let b = compute_advantages(
            &trajs,
            &scores,
            &vec![vec![0.0; 5]; 3],
            AdvantageForm::TrajectoryDecoder,
            0.97,
        )
        .unwrap();
        for row in &b.decoder_term {
            assert!(row.iter().all(|&x| x == row[0]));
        }
        // reward-free env and zero values: the return term is a constant batch
        assert!(b.return_term.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn misaligned_batch_is_rejected() {
        let (trajs, scores, values) = toy();
        assert!(compute_advantages(&trajs, &scores[..2], &values, AdvantageForm::TrajectoryDecoder, 0.97).is_err());
        assert!(compute_advantages(&trajs, &[], &values[..1], AdvantageForm::ReturnOnly, 0.97).is_err());
    }

    proptest! {
        #[test]
        fn normalized_batch_has_zero_mean_unit_std(xs in prop::collection::vec(-100.0f64..100.0, 2..200)) {
            let n = normalize(&xs);
            let len = n.len() as f64;
            let mean = n.iter().sum::<f64>() / len;
            prop_assert!(mean.abs() < 1e-9);
            let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread > 1e-3 {
                let sd = (n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt();
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn returns_satisfy_recursion(rs in prop::collection::vec(-5.0f64..5.0, 1..80), g in 0.01f64..1.0) {
            let r = discounted_returns(&rs, g);
            for t in 0..rs.len() - 1 {
                prop_assert!((r[t] - (rs[t] + g * r[t + 1])).abs() < 1e-9);
            }
            prop_assert_eq!(r[rs.len() - 1], rs[rs.len() - 1]);
        }
    }
}
