//! Per-channel gate agents: one learnable weight per channel, sigmoid
//! keep-probabilities, Bernoulli action sampling, and the closed-form
//! log-policy gradient.
//!
//! Agent weights live in f64: they are scalars outside the tensor runtime
//! and the policy-gradient oracles check against 1e-6 tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default initial agent weight. Its sigmoid is close to 1, so freshly
/// gated channels are almost always kept and exploration starts gentle.
pub const INIT_WEIGHT: f64 = 6.9;

/// Whether one mask is drawn per batch element or shared across the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerSample,
    PerBatch,
}

/// Weights and optimizer state for one gate group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGroup {
    pub group_id: usize,
    pub weights: Vec<f64>,
    pub moment1: Vec<f64>,
    pub moment2: Vec<f64>,
}

impl AgentGroup {
    pub fn new(group_id: usize, channels: usize, init: f64) -> Self {
        AgentGroup {
            group_id,
            weights: vec![init; channels],
            moment1: vec![0.0; channels],
            moment2: vec![0.0; channels],
        }
    }
}

/// All gate agents of a model, ordered by gate-group id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBank {
    pub groups: Vec<AgentGroup>,
    pub init_value: f64,
    pub step: u64,
}

fn sigmoid(w: f64) -> f64 {
    1.0 / (1.0 + (-w).exp())
}

impl AgentBank {
    pub fn new(channel_counts: &[(usize, usize)]) -> Self {
        Self::with_init(channel_counts, INIT_WEIGHT)
    }

    /// `channel_counts` pairs each gate-group id with its channel count.
    pub fn with_init(channel_counts: &[(usize, usize)], init: f64) -> Self {
        AgentBank {
            groups: channel_counts
                .iter()
                .map(|&(id, c)| AgentGroup::new(id, c, init))
                .collect(),
            init_value: init,
            step: 0,
        }
    }

    pub fn total_channels(&self) -> usize {
        self.groups.iter().map(|g| g.weights.len()).sum()
    }

    /// Sigmoid of every agent weight, per group.
    pub fn keep_probabilities(&self) -> Vec<Vec<f64>> {
        self.groups
            .iter()
            .map(|g| g.weights.iter().map(|&w| sigmoid(w)).collect())
            .collect()
    }

    /// Threshold the keep-probabilities: a channel is kept iff p >= threshold.
    /// Pure function of the weights; no randomness involved.
    pub fn deterministic_mask(&self, threshold: f64) -> Vec<Vec<bool>> {
        self.keep_probabilities()
            .iter()
            .map(|ps| ps.iter().map(|&p| p >= threshold).collect())
            .collect()
    }

    /// Independent Bernoulli draws from every agent, fully determined by
    /// `seed`. Per-sample granularity draws one mask row per batch element;
    /// per-batch draws a single shared row.
    pub fn sample_actions(
        &self,
        seed: u64,
        batch_size: usize,
        granularity: Granularity,
    ) -> ActionSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = match granularity {
            Granularity::PerSample => batch_size,
            Granularity::PerBatch => 1,
        };
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let probs: Vec<f64> = g.weights.iter().map(|&w| sigmoid(w)).collect();
                let mut actions = vec![0u8; rows * probs.len()];
                for row in 0..rows {
                    for (j, &p) in probs.iter().enumerate() {
                        actions[row * probs.len() + j] = u8::from(rng.gen::<f64>() < p);
                    }
                }
                GroupActions {
                    group_id: g.group_id,
                    probs,
                    actions,
                }
            })
            .collect();
        ActionSample {
            groups,
            granularity,
            batch_size,
            seed,
        }
    }

    /// One minimizing adaptive update on the agent weights. The caller
    /// passes a descent gradient (negate an ascent direction first).
    pub fn adam_step(&mut self, gradients: &[Vec<f64>], lr: f64) -> Result<()> {
        if gradients.len() != self.groups.len() {
            return Err(Error::ShapeMismatch {
                op: "agent adam",
                dimension: "group count",
                expected: self.groups.len(),
                actual: gradients.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - crate::ops::ADAM_BETA1.powi(t);
        let bc2 = 1.0 - crate::ops::ADAM_BETA2.powi(t);
        for (group, grad) in self.groups.iter_mut().zip(gradients) {
            if grad.len() != group.weights.len() {
                return Err(Error::ShapeMismatch {
                    op: "agent adam",
                    dimension: "channel count",
                    expected: group.weights.len(),
                    actual: grad.len(),
                });
            }
            for j in 0..group.weights.len() {
                let g = grad[j];
                group.moment1[j] =
                    crate::ops::ADAM_BETA1 * group.moment1[j] + (1.0 - crate::ops::ADAM_BETA1) * g;
                group.moment2[j] = crate::ops::ADAM_BETA2 * group.moment2[j]
                    + (1.0 - crate::ops::ADAM_BETA2) * g * g;
                let update = lr * (group.moment1[j] / bc1)
                    / ((group.moment2[j] / bc2).sqrt() + crate::ops::ADAM_EPS);
                group.weights[j] -= update;
            }
        }
        Ok(())
    }
}

/// Actions for one gate group: the probabilities that generated them and
/// a rows x channels binary matrix (rows = batch size, or 1 when shared).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupActions {
    pub group_id: usize,
    pub probs: Vec<f64>,
    pub actions: Vec<u8>,
}

impl GroupActions {
    pub fn channels(&self) -> usize {
        self.probs.len()
    }

    pub fn rows(&self) -> usize {
        if self.probs.is_empty() {
            0
        } else {
            self.actions.len() / self.probs.len()
        }
    }

    pub fn action(&self, row: usize, channel: usize) -> u8 {
        let r = if self.rows() == 1 { 0 } else { row };
        self.actions[r * self.channels() + channel]
    }
}

/// One batch worth of sampled keep/drop masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub groups: Vec<GroupActions>,
    pub granularity: Granularity,
    pub batch_size: usize,
    pub seed: u64,
}

/// Derivative of the Bernoulli log-likelihood through the sigmoid:
/// coefficient a_j - p_j per (row, channel), same layout as the actions.
pub fn log_prob_grad(actions: &ActionSample) -> Vec<Vec<f64>> {
    actions
        .groups
        .iter()
        .map(|g| {
            let c = g.channels();
            g.actions
                .iter()
                .enumerate()
                .map(|(i, &a)| f64::from(a) - g.probs[i % c])
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_of_init_weight() {
        let bank = AgentBank::new(&[(0, 1)]);
        let p = bank.keep_probabilities()[0][0];
        // true sigmoid of 6.9
        assert!((p - 0.998_993_229_179_914_4).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_zero_and_symmetry() {
        let bank = AgentBank::with_init(&[(0, 1)], 0.0);
        assert_eq!(bank.keep_probabilities()[0][0], 0.5);
        let pos = AgentBank::with_init(&[(0, 1)], 6.9).keep_probabilities()[0][0];
        let neg = AgentBank::with_init(&[(0, 1)], -6.9).keep_probabilities()[0][0];
        assert!((pos + neg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let bank = AgentBank::new(&[(0, 5), (1, 3)]);
        let a = bank.sample_actions(42, 8, Granularity::PerSample);
        let b = bank.sample_actions(42, 8, Granularity::PerSample);
        assert_eq!(a, b);
        let c = bank.sample_actions(43, 8, Granularity::PerSample);
        assert_ne!(a, c);
    }

    #[test]
    fn saturated_agent_almost_always_keeps() {
        let bank = AgentBank::with_init(&[(0, 1)], 50.0);
        let sample = bank.sample_actions(7, 10_000, Granularity::PerSample);
        let keep: u32 = sample.groups[0].actions.iter().map(|&a| u32::from(a)).sum();
        assert!(f64::from(keep) / 10_000.0 >= 0.999);
    }

    #[test]
    fn fair_coin_keep_rate() {
        let bank = AgentBank::with_init(&[(0, 1)], 0.0);
        let sample = bank.sample_actions(11, 10_000, Granularity::PerSample);
        let keep: u32 = sample.groups[0].actions.iter().map(|&a| u32::from(a)).sum();
        let rate = f64::from(keep) / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.02, "keep rate {rate}");
    }

    #[test]
    fn per_batch_mask_is_shared() {
        let bank = AgentBank::new(&[(0, 4)]);
        let sample = bank.sample_actions(3, 16, Granularity::PerBatch);
        assert_eq!(sample.groups[0].rows(), 1);
        assert_eq!(sample.groups[0].action(0, 2), sample.groups[0].action(15, 2));
    }

    #[test]
    fn threshold_rules() {
        let mut bank = AgentBank::with_init(&[(0, 3)], 0.0);
        // p = 0.99, 0.49, exactly 0.5
        bank.groups[0].weights[0] = (99.0f64).ln();
        bank.groups[0].weights[1] = (0.49f64 / 0.51).ln();
        bank.groups[0].weights[2] = 0.0;
        let mask = bank.deterministic_mask(0.5);
        assert_eq!(mask[0], vec![true, false, true]);
        // independent of any sampling, and stable across calls
        assert_eq!(mask, bank.deterministic_mask(0.5));
    }

    #[test]
    fn log_prob_grad_hand_values() {
        let bank = AgentBank::with_init(&[(0, 2)], 0.0);
        let mut sample = bank.sample_actions(0, 1, Granularity::PerBatch);
        sample.groups[0].probs = vec![0.5, 0.99];
        sample.groups[0].actions = vec![1, 0];
        let g = log_prob_grad(&sample);
        assert!((g[0][0] - 0.5).abs() < 1e-12);
        assert!((g[0][1] + 0.99).abs() < 1e-12);
    }

    #[test]
    fn log_prob_grad_saturates_to_zero() {
        let bank = AgentBank::with_init(&[(0, 1)], 40.0);
        let mut sample = bank.sample_actions(0, 1, Granularity::PerBatch);
        sample.groups[0].actions = vec![1];
        let g = log_prob_grad(&sample);
        assert!(g[0][0].abs() < 1e-12);
    }

    /// Central finite difference of the Bernoulli log-likelihood in w.
    fn fd_log_prob(w: f64, a: u8, h: f64) -> f64 {
        let ll = |w: f64| {
            let p = sigmoid(w);
            if a == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        };
        (ll(w + h) - ll(w - h)) / (2.0 * h)
    }

    #[test]
    fn log_prob_grad_matches_finite_difference() {
        for &w in &[-2.0, -0.3, 0.0, 0.7, 2.5] {
            for a in [0u8, 1u8] {
                let p = sigmoid(w);
                let analytic = f64::from(a) - p;
                let numeric = fd_log_prob(w, a, 1e-5);
                assert!(
                    (analytic - numeric).abs() <= 1e-6,
                    "w={w} a={a}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn empirical_mean_converges_to_probability() {
        let mut bank = AgentBank::with_init(&[(0, 2)], 0.0);
        bank.groups[0].weights = vec![1.0, -1.5];
        let probs = bank.keep_probabilities()[0].clone();
        let sample = bank.sample_actions(5, 10_000, Granularity::PerSample);
        for j in 0..2 {
            let mean: f64 = (0..10_000)
                .map(|r| f64::from(sample.groups[0].action(r, j)))
                .sum::<f64>()
                / 10_000.0;
            assert!((mean - probs[j]).abs() <= 0.02, "channel {j}: {mean} vs {}", probs[j]);
        }
    }

    proptest! {
        // beyond |w| ~ 36.7 the sigmoid saturates to exactly 0.0 or 1.0 in
        // f64, so the open-interval property is only meaningful inside the
        // representable regime
        #[test]
        fn probabilities_strictly_inside_unit_interval(w in -36.0f64..36.0) {
            let bank = AgentBank::with_init(&[(0, 1)], w);
            let p = bank.keep_probabilities()[0][0];
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn probability_monotone_in_weight(a in -30.0f64..30.0, d in 0.001f64..10.0) {
            let lo = AgentBank::with_init(&[(0, 1)], a).keep_probabilities()[0][0];
            let hi = AgentBank::with_init(&[(0, 1)], a + d).keep_probabilities()[0][0];
            prop_assert!(hi > lo);
        }
    }
}
