//! Gumbel-Top-k subset sampling and its differentiable relaxation.
//!
//! The relaxation runs `k` rounds of a tempered softmax. Each round lowers the
//! logits of already-likely entries by `log(1 - P)`. All rounds are carried in
//! log space: `log(1 - P)` comes from a leave-one-out log-sum-exp and the
//! relaxed k-hot vector is returned as `log a = logsumexp_j log P^j`, so the
//! pooling code can add it to attention logits directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::topk::top_k;

/// Clamp applied to uniforms before the double log.
pub const UNIFORM_EPS: f64 = 1e-12;

/// `-log(-log u)` with `u` clamped into `[1e-12, 1 - 1e-12]`.
pub fn gumbel_noise(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// One standard Gumbel draw.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    gumbel_noise(rng.random::<f64>())
}

/// `log p + g` with fresh independent Gumbel noise per entry.
pub fn perturb<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> Vec<f64> {
    log_probs.iter().map(|lp| lp + sample_gumbel(rng)).collect()
}

/// `log p + noise` with caller-supplied noise (all zeros disables the noise).
pub fn perturb_with(log_probs: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if log_probs.len() != noise.len() {
        return Err(Error::dim("perturb_with", format!("{} vs {}", log_probs.len(), noise.len())));
    }
    Ok(log_probs.iter().zip(noise).map(|(a, b)| a + b).collect())
}

/// Output of [`relaxed_topk`].
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSubset {
    pub perturbed: Vec<f64>,
    /// Relaxed k-hot vector `a = Σ_j a^j`.
    pub a: Vec<f64>,
    /// Per-round relaxed one-hot vectors `a^1 … a^k`.
    pub rounds: Vec<Vec<f64>>,
    /// Top-k of the perturbed weights.
    pub hard: Vec<usize>,
}

fn check_k(op: &'static str, k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::domain(op, format!("need 1 <= k <= N, got k = {k}, N = {n}")));
    }
    Ok(())
}

/// Relaxed top-k on a tape, row-wise over a `rows × N` matrix (or a vector).
///
/// Returns `log a` with the same shape as `w` plus the per-round
/// `log P^j` nodes.
pub fn relaxed_topk_log(tape: &mut Tape<'_>, w: Var, k: usize, tau: f64) -> Result<(Var, Vec<Var>)> {
    let (_, n) = tape.value(w).rows_cols();
    check_k("relaxed_topk", k, n)?;
    let mut alpha = w;
    let mut rounds = Vec::with_capacity(k);
    for j in 0..k {
        rounds.push(tape.log_softmax_t(alpha, tau)?);
        if j + 1 < k {
            let penalty = tape.log1m_softmax_t(alpha, tau)?;
            alpha = tape.add(alpha, penalty)?;
        }
    }
    let log_a = tape.logsumexp_stack(&rounds)?;
    Ok((log_a, rounds))
}

/// Relaxed top-k of a perturbed weight vector.
pub fn relaxed_topk(perturbed: &[f64], k: usize, tau: f64) -> Result<RelaxedSubset> {
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::vector(perturbed.to_vec()));
    let (log_a, rounds) = relaxed_topk_log(&mut tape, w, k, tau)?;
    let exp = |v: &Tensor| v.data().iter().map(|x| x.exp()).collect::<Vec<_>>();
    Ok(RelaxedSubset {
        perturbed: perturbed.to_vec(),
        a: exp(tape.value(log_a)),
        rounds: rounds.iter().map(|&r| exp(tape.value(r))).collect(),
        hard: top_k(perturbed, k),
    })
}

/// Exponential per-epoch temperature decay with a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub decay: f64,
}

impl AnnealSchedule {
    pub fn new(tau_start: f64, tau_end: f64, decay: f64) -> Result<Self> {
        if !(tau_end > 0.0 && tau_start >= tau_end) {
            return Err(Error::config("tau_start", "need tau_start >= tau_end > 0"));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config("tau_decay", "must be in (0, 1]"));
        }
        Ok(Self { tau_start, tau_end, decay })
    }

    /// `max(tau_end, tau_start * decay^epoch)`.
    pub fn tau(&self, epoch: usize) -> f64 {
        let e = i32::try_from(epoch).unwrap_or(i32::MAX);
        (self.tau_start * self.decay.powi(e)).max(self.tau_end)
    }
}

/// Convenience: `anneal(schedule, epoch)`.
pub fn anneal(schedule: &AnnealSchedule, epoch: usize) -> f64 {
    schedule.tau(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gumbel_fixed_points() {
        assert_relative_eq!(gumbel_noise((-1f64).exp()), 0.0, epsilon = 1e-15);
        assert_relative_eq!(gumbel_noise((-std::f64::consts::E).exp()), -1.0, epsilon = 1e-14);
        assert!(gumbel_noise(0.0).is_finite() && gumbel_noise(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_gumbel(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
    }

    #[test]
    fn zero_noise_is_identity() {
        let lp = [-0.3, -1.2, -2.0];
        assert_eq!(perturb_with(&lp, &[0.0; 3]).unwrap(), lp.to_vec());
    }

    #[test]
    fn gumbel_max_matches_probabilities() {
        let p = [0.7, 0.2, 0.1];
        let lp: Vec<f64> = p.iter().map(|x: &f64| x.ln()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[top_k(&perturb(&lp, &mut rng), 1)[0]] += 1;
        }
        for (c, pi) in counts.iter().zip(p) {
            assert!((*c as f64 / draws as f64 - pi).abs() < 0.01);
        }
    }

    #[test]
    fn separated_logits_give_hard_pair() {
        let r = relaxed_topk(&[10.0, 0.0, -10.0], 2, 0.01).unwrap();
        for (a, want) in r.a.iter().zip([1.0, 1.0, 0.0]) {
            assert!((a - want).abs() < 1e-3, "{:?}", r.a);
        }
        assert_eq!(r.hard, vec![0, 1]);
    }

    #[test]
    fn k_equals_n_selects_everything() {
        let r = relaxed_topk(&[2.0, -1.0, 0.5, 3.0], 4, 0.01).unwrap();
        for a in &r.a {
            assert!((a - 1.0).abs() < 1e-6, "{:?}", r.a);
        }
        // soft regime: the mass still sums to N but is not spread evenly
        let r = relaxed_topk(&[2.0, -1.0, 0.5, 3.0], 4, 0.1).unwrap();
        assert!((r.a.iter().sum::<f64>() - 4.0).abs() < 1e-9);
        let r = relaxed_topk(&[0.7; 5], 5, 1.0).unwrap();
        r.a.iter().for_each(|a| assert!((a - 1.0).abs() < 1e-9));
    }

    #[test]
    fn k_one_is_softmax() {
        let w = [0.3, -1.0, 2.0];
        let r = relaxed_topk(&w, 1, 0.5).unwrap();
        let z: f64 = w.iter().map(|x| (x / 0.5).exp()).sum();
        for (a, x) in r.a.iter().zip(w) {
            assert_relative_eq!(*a, (x / 0.5).exp() / z, epsilon = 1e-15);
        }
    }

    #[test]
    fn bad_k_is_rejected() {
        assert!(relaxed_topk(&[1.0, 2.0], 3, 1.0).is_err());
        assert!(relaxed_topk(&[1.0, 2.0], 0, 1.0).is_err());
    }

    #[test]
    fn anneal_schedule() {
        let s = AnnealSchedule::new(1.0, 0.05, 0.8).unwrap();
        assert_eq!(anneal(&s, 0), 1.0);
        assert_relative_eq!(s.tau(3), 0.512, epsilon = 1e-12);
        assert_eq!(s.tau(10_000), 0.05);
        assert!((0..50).all(|e| s.tau(e + 1) <= s.tau(e)));
        assert!(AnnealSchedule::new(0.01, 0.1, 0.9).is_err());
    }

    #[test]
    fn relaxation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for tau in [1.0, 0.1] {
            for _ in 0..10 {
                let x = Tensor::randn(&[6], 1.0, &mut rng);
                let weights = Tensor::randn(&[6], 1.0, &mut rng);
                let err = grad_check(
                    |t, w| {
                        let (log_a, _) = relaxed_topk_log(t, w, 3, tau)?;
                        let a = t.exp(log_a);
                        let c = t.constant(weights.clone());
                        let p = t.mul(a, c)?;
                        Ok(t.sum(p))
                    },
                    &x,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-4, "tau {tau}: {err}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn relaxed_sum_is_k(w in prop::collection::vec(-20.0f64..20.0, 2..12), k in 1usize..12, tau_exp in -2.0f64..0.5) {
            let k = k.min(w.len());
            let tau = 10f64.powf(tau_exp);
            let r = relaxed_topk(&w, k, tau).unwrap();
            let s: f64 = r.a.iter().sum();
            prop_assert!((s - k as f64).abs() < 1e-9, "sum {} k {}", s, k);
            for round in &r.rounds {
                prop_assert!((round.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn hard_regime_matches_k_hot(
            w in prop::collection::vec(1.0f64..3.0, 3..11)
                .prop_map(|gaps| gaps.iter().scan(0.0, |acc, g| { *acc += g; Some(*acc) }).collect::<Vec<f64>>())
                .prop_shuffle(),
            k_seed in 0usize..1000,
        ) {
            let k = 1 + k_seed % (w.len() - 1);
            let r = relaxed_topk(&w, k, 0.01).unwrap();
            let hard = top_k(&w, k);
            for (m, a) in r.a.iter().enumerate() {
                let want = if hard.contains(&m) { 1.0 } else { 0.0 };
                prop_assert!((a - want).abs() < 1e-3, "{:?} k={} a={:?}", w, k, r.a);
            }
        }
    }
}
