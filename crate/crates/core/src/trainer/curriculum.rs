//! Context scheduling: uniform sampling, the K-growth rule, and the
//! random-reward baseline's per-context reward vectors.

use rand::RngExt;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// `min(floor(1.5 K + 1), K_max)`, in exact integer arithmetic.
pub fn next_k(k: usize, k_max: usize) -> usize {
    ((3 * k + 2) / 2).min(k_max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumState {
    pub k_current: usize,
    pub k_max: usize,
    /// `E[P_D(c | tau)]` over the latest epoch's batch.
    pub mastery_stat: f64,
}

impl CurriculumState {
    pub fn new(k_init: usize, k_max: usize) -> Self {
        CurriculumState {
            k_current: k_init.min(k_max),
            k_max,
            mastery_stat: 0.0,
        }
    }

    /// Grow `K` if the recorded mastery statistic reaches `threshold`.
    /// Returns whether `K` changed.
    pub fn update(&mut self, threshold: f64) -> bool {
        if self.mastery_stat >= threshold {
            let next = next_k(self.k_current, self.k_max);
            let grew = next != self.k_current;
            self.k_current = next;
            grew
        } else {
            false
        }
    }
}

/// Uniform context id in `[0, k)`.
pub fn sample_context(k: usize, rng: &mut Rng) -> usize {
    assert!(k >= 1, "sample_context needs k >= 1");
    rng.random_range(0..k)
}

/// Per-context unit vectors `v_c`; the reward is `v_c . s`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomRewardSpec {
    pub vectors: Vec<Vec<f64>>,
}

impl RandomRewardSpec {
    pub fn generate(contexts: usize, obs_dim: usize, rng: &mut Rng) -> Self {
        let vectors = (0..contexts)
            .map(|_| loop {
                let v: Vec<f64> = (0..obs_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break v.iter().map(|x| x / norm).collect();
                }
            })
            .collect();
        RandomRewardSpec { vectors }
    }

    pub fn reward(&self, state: &[f64], context_id: usize) -> Result<f64> {
        let v = self.vectors.get(context_id).ok_or(Error::Context {
            id: context_id,
            k: self.vectors.len(),
        })?;
        if v.len() != state.len() {
            return Err(Error::dim(
                "random reward",
                format!("state width {}, vector width {}", state.len(), v.len()),
            ));
        }
        Ok(v.iter().zip(state).map(|(a, b)| a * b).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;

    #[test]
    fn growth_chain() {
        let mut s = CurriculumState::new(2, 64);
        let mut seen = vec![s.k_current];
        for _ in 0..10 {
            s.mastery_stat = 1.0;
            s.update(0.86);
            seen.push(s.k_current);
        }
        assert_eq!(seen, vec![2, 4, 7, 11, 17, 26, 40, 61, 64, 64, 64]);
        assert_eq!(next_k(8, 64), 13);
    }

    #[test]
    fn below_threshold_keeps_k() {
        let mut s = CurriculumState::new(4, 64);
        s.mastery_stat = 0.8599;
        assert!(!s.update(0.86));
        assert_eq!(s.k_current, 4);
    }

    #[test]
    fn uniform_bins() {
        let mut rng = rng_from(11, &[]);
        let n = 100_000;
        let mut bins = [0usize; 4];
        for _ in 0..n {
            bins[sample_context(4, &mut rng)] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for b in bins {
            assert!((b as f64 - n as f64 * 0.25).abs() < 4.0 * sigma, "{bins:?}");
        }
        assert!((0..50).all(|_| sample_context(1, &mut rng) == 0));
    }

    #[test]
    fn random_reward_examples() {
        let spec = RandomRewardSpec {
            vectors: vec![vec![1.0, 0.0, 0.0, 0.0]],
        };
        assert_eq!(spec.reward(&[0.5, 0.3, 0.0, 0.0], 0).unwrap(), 0.5);
        assert_eq!(spec.reward(&[0.0; 4], 0).unwrap(), 0.0);
        assert!(matches!(spec.reward(&[0.0; 4], 1), Err(Error::Context { .. })));
    }

    #[test]
    fn generated_vectors_are_unit() {
        let spec = RandomRewardSpec::generate(64, 4, &mut rng_from(1, &[]));
        for v in &spec.vectors {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn k_is_monotone_and_capped(k_max in 1usize..200, pattern in prop::collection::vec(any::<bool>(), 0..40)) {
            let mut s = CurriculumState::new(1, k_max);
            for mastered in pattern {
                let before = s.k_current;
                s.mastery_stat = if mastered { 1.0 } else { 0.0 };
                s.update(0.86);
                prop_assert!(s.k_current >= before && s.k_current <= k_max);
            }
        }

        #[test]
        fn random_reward_is_linear(
            a in prop::collection::vec(-10i32..10, 4),
            b in prop::collection::vec(-10i32..10, 4),
        ) {
            // small-integer-over-power-of-two states keep every sum exact
            let spec = RandomRewardSpec { vectors: vec![vec![0.5, -0.5, 0.5, 0.5]] };
            let a: Vec<f64> = a.iter().map(|&x| x as f64 / 8.0).collect();
            let b: Vec<f64> = b.iter().map(|&x| x as f64 / 8.0).collect();
            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            prop_assert_eq!(spec.reward(&ab, 0).unwrap(), spec.reward(&a, 0).unwrap() + spec.reward(&b, 0).unwrap());
        }
    }
}
