//! Compression and accuracy rewards, their combination, and the
//! score-function gradient estimator for the gate agents, together with
//! an exhaustive-enumeration oracle for validating both.
//!
//! Per gate group i and batch element b the estimator is
//!   grad_j = (1/N) * sum_b (a_{b,j} - p_j) * R_{b,i}
//! returned as an ascent direction; the updater negates it for its
//! minimize convention. No baseline or variance-reduction term is
//! subtracted: the raw estimator is the one being studied, variance and
//! all.

use crate::agent::{ActionSample, AgentBank};
use crate::error::{Error, Result};

/// Maximum gated channels for which exhaustive mask enumeration runs.
pub const ENUMERATION_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    /// Penalty for a wrong prediction; 0 disables the accuracy pressure.
    pub penalty: f64,
}

impl RewardConfig {
    pub fn new(penalty: f64) -> Result<Self> {
        if !penalty.is_finite() || penalty < 0.0 {
            return Err(Error::Config {
                reason: format!("penalty must be non-negative, got {penalty}"),
            });
        }
        Ok(RewardConfig { penalty })
    }
}

/// All reward pieces for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBatch {
    /// Per group: per mask row (batch rows, or a single shared row).
    pub compression: Vec<Vec<f64>>,
    /// Per sample: +1 or -penalty.
    pub accuracy: Vec<f64>,
    /// Per group: per sample, compression times accuracy.
    pub combined: Vec<Vec<f64>>,
    pub batch_size: usize,
}

/// Dropped-channel count per mask row of every group.
pub fn compression_reward(actions: &ActionSample) -> Vec<Vec<f64>> {
    actions
        .groups
        .iter()
        .map(|g| {
            let c = g.channels();
            (0..g.rows())
                .map(|r| {
                    g.actions[r * c..(r + 1) * c]
                        .iter()
                        .map(|&a| 1.0 - f64::from(a))
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// +1 per correct prediction, -penalty per wrong one.
pub fn accuracy_reward(predictions: &[usize], labels: &[usize], penalty: f64) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy_reward",
            dimension: "prediction count",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| if p == y { 1.0 } else { -penalty })
        .collect())
}

/// Multiply each group's compression reward with the per-sample accuracy
/// reward. A shared compression row broadcasts across the batch.
pub fn combined_reward(
    compression: &[Vec<f64>],
    accuracy: &[f64],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if accuracy.len() != batch_size {
        return Err(Error::ShapeMismatch {
            op: "combined_reward",
            dimension: "accuracy rewards",
            expected: batch_size,
            actual: accuracy.len(),
        });
    }
    compression
        .iter()
        .map(|rows| {
            if rows.len() != 1 && rows.len() != batch_size {
                return Err(Error::ShapeMismatch {
                    op: "combined_reward",
                    dimension: "compression rows",
                    expected: batch_size,
                    actual: rows.len(),
                });
            }
            Ok((0..batch_size)
                .map(|b| rows[if rows.len() == 1 { 0 } else { b }] * accuracy[b])
                .collect())
        })
        .collect()
}

/// Convenience wrapper: compute all three reward pieces for a batch.
pub fn compute_rewards(
    actions: &ActionSample,
    predictions: &[usize],
    labels: &[usize],
    config: RewardConfig,
) -> Result<RewardBatch> {
    let compression = compression_reward(actions);
    let accuracy = accuracy_reward(predictions, labels, config.penalty)?;
    let combined = combined_reward(&compression, &accuracy, actions.batch_size)?;
    Ok(RewardBatch {
        compression,
        accuracy,
        combined,
        batch_size: actions.batch_size,
    })
}

/// The batch REINFORCE estimator, one ascent gradient per agent weight:
/// grad_j = (1/N) * sum_b (a_{b,j} - p_j) * R_{b,group(j)}.
pub fn reinforce_gradient(
    actions: &ActionSample,
    combined: &[Vec<f64>],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if combined.len() != actions.groups.len() {
        return Err(Error::ShapeMismatch {
            op: "reinforce_gradient",
            dimension: "reward groups",
            expected: actions.groups.len(),
            actual: combined.len(),
        });
    }
    let n = batch_size as f64;
    actions
        .groups
        .iter()
        .zip(combined)
        .map(|(g, rewards)| {
            if rewards.len() != batch_size {
                return Err(Error::ShapeMismatch {
                    op: "reinforce_gradient",
                    dimension: "per-sample rewards",
                    expected: batch_size,
                    actual: rewards.len(),
                });
            }
            let c = g.channels();
            let mut grad = vec![0.0f64; c];
            for b in 0..batch_size {
                let r = rewards[b];
                for (j, slot) in grad.iter_mut().enumerate() {
                    *slot += (f64::from(g.action(b, j)) - g.probs[j]) * r;
                }
            }
            for slot in &mut grad {
                *slot /= n;
            }
            Ok(grad)
        })
        .collect()
}

/// A deterministic reward over a joint mask: given one binary row per
/// group, return one reward per group.
pub type MaskReward<'a> = &'a dyn Fn(&[Vec<u8>]) -> Vec<f64>;

fn check_enumerable(bank: &AgentBank) -> Result<usize> {
    let total = bank.total_channels();
    if total > ENUMERATION_LIMIT {
        return Err(Error::TooManyChannels {
            total,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(total)
}

fn enumerate_masks<F: FnMut(&[Vec<u8>], f64)>(probs: &[Vec<f64>], total: usize, mut visit: F) {
    let mut mask: Vec<Vec<u8>> = probs.iter().map(|p| vec![0u8; p.len()]).collect();
    for bits in 0u64..(1u64 << total) {
        let mut bit = 0;
        let mut prob = 1.0f64;
        for (gi, ps) in probs.iter().enumerate() {
            for (j, &p) in ps.iter().enumerate() {
                let a = ((bits >> bit) & 1) as u8;
                mask[gi][j] = a;
                prob *= if a == 1 { p } else { 1.0 - p };
                bit += 1;
            }
        }
        visit(&mask, prob);
    }
}

fn expected_total_reward(probs: &[Vec<f64>], total: usize, reward: MaskReward) -> f64 {
    let mut j = 0.0f64;
    enumerate_masks(probs, total, |mask, prob| {
        let r: f64 = reward(mask).iter().sum();
        j += prob * r;
    });
    j
}

/// Exhaustively computed objective J(w) = sum_i E[R_i] and its gradient by
/// central finite differences (h = 1e-5). Only feasible for small banks;
/// this is the validation oracle for the sampled estimator.
pub fn expected_reward_exact(
    bank: &AgentBank,
    reward: MaskReward,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let total = check_enumerable(bank)?;
    let probs = bank.keep_probabilities();
    let j = expected_total_reward(&probs, total, reward);

    let h = 1e-5f64;
    let mut grad = Vec::with_capacity(bank.groups.len());
    for gi in 0..bank.groups.len() {
        let mut g = vec![0.0f64; bank.groups[gi].weights.len()];
        for (ji, slot) in g.iter_mut().enumerate() {
            let mut probe = bank.clone();
            probe.groups[gi].weights[ji] += h;
            let up = expected_total_reward(&probe.keep_probabilities(), total, reward);
            probe.groups[gi].weights[ji] -= 2.0 * h;
            let down = expected_total_reward(&probe.keep_probabilities(), total, reward);
            *slot = (up - down) / (2.0 * h);
        }
        grad.push(g);
    }
    Ok((j, grad))
}

/// Exact expectation of the REINFORCE estimator over all masks:
/// E[(a_j - p_j) * R_{group(j)}] per agent weight. Comparing this against
/// [`expected_reward_exact`]'s gradient validates the estimator.
pub fn expected_estimator_exact(bank: &AgentBank, reward: MaskReward) -> Result<Vec<Vec<f64>>> {
    let total = check_enumerable(bank)?;
    let probs = bank.keep_probabilities();
    let mut acc: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0f64; p.len()]).collect();
    enumerate_masks(&probs, total, |mask, prob| {
        let rewards = reward(mask);
        for (gi, ps) in probs.iter().enumerate() {
            for j in 0..ps.len() {
                acc[gi][j] += prob * (f64::from(mask[gi][j]) - ps[j]) * rewards[gi];
            }
        }
    });
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentBank, Granularity, GroupActions};
    use proptest::prelude::*;

    fn manual_sample(groups: Vec<GroupActions>, batch: usize, g: Granularity) -> ActionSample {
        ActionSample {
            groups,
            granularity: g,
            batch_size: batch,
            seed: 0,
        }
    }

    #[test]
    fn compression_counts_zeros() {
        let cases = [
            (vec![1u8, 1, 1, 1], 0.0),
            (vec![0, 0, 0, 0], 4.0),
            (vec![1, 0, 1, 0], 2.0),
        ];
        for (actions, expected) in cases {
            let sample = manual_sample(
                vec![GroupActions {
                    group_id: 0,
                    probs: vec![0.5; 4],
                    actions,
                }],
                1,
                Granularity::PerBatch,
            );
            assert_eq!(compression_reward(&sample)[0], vec![expected]);
        }
    }

    #[test]
    fn accuracy_reward_values() {
        let r = accuracy_reward(&[1, 2, 0], &[1, 0, 0], 500.0).unwrap();
        assert_eq!(r, vec![1.0, -500.0, 1.0]);
        let r0 = accuracy_reward(&[3], &[1], 0.0).unwrap();
        assert_eq!(r0, vec![-0.0]);
        assert_eq!(r0[0], 0.0);
    }

    #[test]
    fn combined_reward_values() {
        let c = combined_reward(&[vec![3.0]], &[1.0], 1).unwrap();
        assert_eq!(c[0], vec![3.0]);
        let c = combined_reward(&[vec![3.0]], &[-2.0], 1).unwrap();
        assert_eq!(c[0], vec![-6.0]);
        let c = combined_reward(&[vec![0.0]], &[-2.0], 1).unwrap();
        assert_eq!(c[0], vec![-0.0]);
        assert_eq!(c[0][0], 0.0);
    }

    #[test]
    fn reinforce_single_agent_hand_value() {
        let sample = manual_sample(
            vec![GroupActions {
                group_id: 0,
                probs: vec![0.5],
                actions: vec![1],
            }],
            1,
            Granularity::PerSample,
        );
        let grad = reinforce_gradient(&sample, &[vec![2.0]], 1).unwrap();
        assert!((grad[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reinforce_averages_over_batch() {
        let sample = manual_sample(
            vec![GroupActions {
                group_id: 0,
                probs: vec![0.25],
                actions: vec![1, 0],
            }],
            2,
            Granularity::PerSample,
        );
        let grad = reinforce_gradient(&sample, &[vec![4.0, 8.0]], 2).unwrap();
        let g1 = (1.0 - 0.25) * 4.0;
        let g2 = (0.0 - 0.25) * 8.0;
        assert!((grad[0][0] - (g1 + g2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn reinforce_shape_mismatch() {
        let sample = manual_sample(
            vec![GroupActions {
                group_id: 0,
                probs: vec![0.5],
                actions: vec![1],
            }],
            1,
            Granularity::PerSample,
        );
        assert!(matches!(
            reinforce_gradient(&sample, &[], 1).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
        assert!(matches!(
            reinforce_gradient(&sample, &[vec![1.0, 2.0]], 1).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn constant_reward_has_zero_expected_gradient() {
        let mut bank = AgentBank::with_init(&[(0, 3)], 0.0);
        bank.groups[0].weights = vec![-0.5, 0.3, 1.2];
        let est = expected_estimator_exact(&bank, &|_| vec![7.0]).unwrap();
        for g in &est[0] {
            assert!(g.abs() < 1e-12, "sum over masks of pi * grad log pi is 0");
        }
    }

    #[test]
    fn exact_objective_single_channel_cases() {
        // reward 1 for dropping, 0 for keeping
        let drop_reward: MaskReward = &|mask| vec![f64::from(mask[0][0] == 0)];
        let bank = AgentBank::with_init(&[(0, 1)], 0.0);
        let (j, _) = expected_reward_exact(&bank, drop_reward).unwrap();
        assert!((j - 0.5).abs() < 1e-12);

        let bank99 = AgentBank::with_init(&[(0, 1)], (99.0f64).ln());
        let (j, _) = expected_reward_exact(&bank99, drop_reward).unwrap();
        assert!((j - 0.01).abs() < 1e-9);
    }

    #[test]
    fn estimator_expectation_matches_objective_gradient() {
        // separable reward: each group is paid its own weighted drop count
        let reward: MaskReward = &|mask| {
            mask.iter()
                .enumerate()
                .map(|(gi, row)| {
                    let drops: f64 = row.iter().map(|&a| 1.0 - f64::from(a)).sum();
                    drops * (1.0 + gi as f64)
                })
                .collect()
        };
        let mut bank = AgentBank::with_init(&[(0, 3), (1, 2)], 0.0);
        bank.groups[0].weights = vec![0.8, -1.1, 0.2];
        bank.groups[1].weights = vec![2.0, -0.4];
        let (_, dj) = expected_reward_exact(&bank, reward).unwrap();
        let est = expected_estimator_exact(&bank, reward).unwrap();
        for (a, b) in dj.iter().flatten().zip(est.iter().flatten()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn enumeration_limit_enforced() {
        let bank = AgentBank::new(&[(0, 6), (1, 5)]);
        let err = expected_reward_exact(&bank, &|_| vec![0.0, 0.0]).unwrap_err();
        assert_eq!(
            err,
            Error::TooManyChannels {
                total: 11,
                limit: ENUMERATION_LIMIT
            }
        );
    }

    #[test]
    fn estimator_formula_is_the_per_sample_mean() {
        // recompute the estimator from its definition and compare
        let bank = AgentBank::with_init(&[(0, 2), (1, 3)], 0.4);
        let sample = bank.sample_actions(99, 16, Granularity::PerSample);
        let rewards: Vec<Vec<f64>> = (0..2)
            .map(|gi| (0..16).map(|b| ((b + gi) % 5) as f64 - 1.0).collect())
            .collect();
        let grad = reinforce_gradient(&sample, &rewards, 16).unwrap();
        for (gi, g) in sample.groups.iter().enumerate() {
            for j in 0..g.channels() {
                let mean: f64 = (0..16)
                    .map(|b| (f64::from(g.action(b, j)) - g.probs[j]) * rewards[gi][b])
                    .sum::<f64>()
                    / 16.0;
                assert!((grad[gi][j] - mean).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn combined_sign_follows_accuracy(
            drops in 0usize..8,
            channels in 8usize..16,
            penalty in 0.0f64..600.0,
        ) {
            let actions: Vec<u8> = (0..channels).map(|i| u8::from(i >= drops)).collect();
            let sample = manual_sample(
                vec![GroupActions { group_id: 0, probs: vec![0.5; channels], actions }],
                1,
                Granularity::PerBatch,
            );
            let comp = compression_reward(&sample);
            prop_assert!(comp[0][0] >= 0.0 && comp[0][0] <= channels as f64);
            let pos = combined_reward(&comp, &[1.0], 1).unwrap();
            prop_assert!(pos[0][0] >= 0.0);
            let neg = combined_reward(&comp, &[-penalty], 1).unwrap();
            prop_assert!(neg[0][0] <= 0.0);
        }
    }
}
