//! Group advantage transforms.
//!
//! A group is the G completions sampled for one prompt at one training
//! step. Each transform maps the group's raw rewards to per-completion
//! advantages that are broadcast identically across tokens: z-score
//! (center and divide by the population std), equidistant rank on
//! [-2, 2], and a logistic-smoothed soft rank interpolating between the
//! hard rank and all-zero advantages.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default tolerance under which the group std counts as degenerate.
pub const DEFAULT_DEGENERATE_TOLERANCE: f64 = 1e-12;

/// The G reward-model scores of one prompt's completions.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    pub rewards: Vec<f64>,
    pub prompt_id: usize,
}

impl RewardGroup {
    /// Validates G >= 2 and finiteness of every entry.
    pub fn new(rewards: Vec<f64>, prompt_id: usize) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::GroupTooSmall(rewards.len()));
        }
        for (index, &value) in rewards.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteReward { index, value });
            }
        }
        Ok(Self { rewards, prompt_id })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Which transform produced an advantage vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "temperature")]
pub enum AdvantageKind {
    ZScore,
    Rank,
    SoftRank(f64),
}

impl AdvantageKind {
    /// Short label used in file names and CSV output.
    pub fn label(&self) -> String {
        match self {
            AdvantageKind::ZScore => "zscore".to_string(),
            AdvantageKind::Rank => "rank".to_string(),
            AdvantageKind::SoftRank(t) => format!("softrank_{t}"),
        }
    }

    /// Applies this transform to a reward group.
    pub fn transform(&self, group: &RewardGroup) -> Result<AdvantageVector> {
        match self {
            AdvantageKind::ZScore => z_score_advantage(group, DEFAULT_DEGENERATE_TOLERANCE),
            AdvantageKind::Rank => rank_advantage(group),
            AdvantageKind::SoftRank(t) => soft_rank_advantage(group, *t),
        }
    }
}

/// Per-completion advantages for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub kind: AdvantageKind,
}

impl AdvantageVector {
    /// Mean of squared advantages, (1/G) sum A_i^2.
    pub fn mean_square(&self) -> f64 {
        let g = self.values.len() as f64;
        self.values.iter().map(|a| a * a).sum::<f64>() / g
    }
}

/// Standardized advantages: (r_i - mean) / std with the population
/// (divisor-G) standard deviation, so the mean of squared advantages is
/// exactly 1 for non-degenerate groups. A group whose std falls below
/// `degenerate_tolerance` carries no preference signal and maps to all
/// zeros.
pub fn z_score_advantage(group: &RewardGroup, degenerate_tolerance: f64) -> Result<AdvantageVector> {
    let checked = RewardGroup::new(group.rewards.clone(), group.prompt_id)?;
    let g = checked.len() as f64;
    let mean = checked.rewards.iter().sum::<f64>() / g;
    let var = checked
        .rewards
        .iter()
        .map(|r| (r - mean) * (r - mean))
        .sum::<f64>()
        / g;
    let std = var.sqrt();
    let values = if std < degenerate_tolerance {
        vec![0.0; checked.len()]
    } else {
        checked.rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageVector {
        values,
        kind: AdvantageKind::ZScore,
    })
}

/// Equidistant rank advantages: the highest reward gets 2, the lowest
/// -2, interior completions spaced by 4/(G-1) according to descending
/// reward rank. Exact ties receive the mean of the advantage values of
/// the tied rank positions (midrank), which keeps the vector zero-sum.
pub fn rank_advantage(group: &RewardGroup) -> Result<AdvantageVector> {
    let checked = RewardGroup::new(group.rewards.clone(), group.prompt_id)?;
    let g = checked.len();
    let spacing = 4.0 / (g as f64 - 1.0);

    // Stable descending sort by (reward, original index).
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        checked.rewards[b]
            .partial_cmp(&checked.rewards[a])
            .expect("rewards validated finite")
            .then(a.cmp(&b))
    });

    let mut values = vec![0.0; g];
    let mut pos = 0;
    while pos < g {
        let mut end = pos + 1;
        while end < g && checked.rewards[order[end]] == checked.rewards[order[pos]] {
            end += 1;
        }
        // Rank positions pos..end (0-based) are tied; average their
        // equidistant advantage values.
        let mut sum = 0.0;
        for k in pos..end {
            sum += 2.0 - k as f64 * spacing;
        }
        let midrank_value = sum / (end - pos) as f64;
        for &i in &order[pos..end] {
            values[i] = midrank_value;
        }
        pos = end;
    }

    Ok(AdvantageVector {
        values,
        kind: AdvantageKind::Rank,
    })
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smoothed rank advantages. The ascending smoothed rank is
/// rho(i) = 1 + sum_{j != i} sigma((r_i - r_j) / T), with the self term
/// fixed at 1 so the hard-rank limit is exact, and the advantage is
/// 2 - (G - rho(i)) * 4/(G-1). T -> 0 recovers `rank_advantage`
/// (including midrank ties, since sigma(0) = 1/2); T -> infinity sends
/// every advantage to 0.
pub fn soft_rank_advantage(group: &RewardGroup, smoothing_temperature: f64) -> Result<AdvantageVector> {
    if !(smoothing_temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(smoothing_temperature));
    }
    let checked = RewardGroup::new(group.rewards.clone(), group.prompt_id)?;
    let g = checked.len();
    let spacing = 4.0 / (g as f64 - 1.0);
    let values = (0..g)
        .map(|i| {
            let mut rho = 1.0;
            for j in 0..g {
                if j != i {
                    rho += logistic((checked.rewards[i] - checked.rewards[j]) / smoothing_temperature);
                }
            }
            2.0 - (g as f64 - rho) * spacing
        })
        .collect();
    Ok(AdvantageVector {
        values,
        kind: AdvantageKind::SoftRank(smoothing_temperature),
    })
}

/// Broadcasts per-completion advantages across `token_count` tokens:
/// row i is value_i repeated.
pub fn broadcast(advantages: &AdvantageVector, token_count: usize) -> Result<Vec<Vec<f64>>> {
    if token_count == 0 {
        return Err(Error::InvalidConfig("token_count must be >= 1".into()));
    }
    if advantages.values.len() < 2 {
        return Err(Error::GroupTooSmall(advantages.values.len()));
    }
    Ok(advantages
        .values
        .iter()
        .map(|&a| vec![a; token_count])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn group(rewards: &[f64]) -> RewardGroup {
        RewardGroup::new(rewards.to_vec(), 0).unwrap()
    }

    #[test]
    fn z_score_three_point() {
        let adv = z_score_advantage(&group(&[1.0, 2.0, 3.0]), 1e-12).unwrap();
        // population std of [1,2,3] is sqrt(2/3)
        let s = (2.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(adv.values[0], -1.0 / s, epsilon = 1e-12);
        assert_abs_diff_eq!(adv.values[0], -1.224_744_871_391_589, epsilon = 1e-12);
        assert_abs_diff_eq!(adv.values[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adv.values[2], 1.224_744_871_391_589, epsilon = 1e-12);
    }

    #[test]
    fn z_score_degenerate_all_equal() {
        let adv = z_score_advantage(&group(&[5.0, 5.0, 5.0]), 1e-12).unwrap();
        assert_eq!(adv.values, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn z_score_two_point() {
        let adv = z_score_advantage(&group(&[0.0, 1.0]), 1e-12).unwrap();
        assert_abs_diff_eq!(adv.values[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adv.values[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_small_and_non_finite_groups() {
        assert!(matches!(
            RewardGroup::new(vec![0.0], 0),
            Err(Error::GroupTooSmall(1))
        ));
        match RewardGroup::new(vec![0.0, f64::NAN, 1.0], 0) {
            Err(Error::NonFiniteReward { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFiniteReward, got {other:?}"),
        }
    }

    #[test]
    fn rank_two_point() {
        let adv = rank_advantage(&group(&[0.3, 0.9])).unwrap();
        assert_eq!(adv.values, vec![-2.0, 2.0]);
    }

    #[test]
    fn rank_five_point() {
        let adv = rank_advantage(&group(&[10.0, 50.0, 20.0, 40.0, 30.0])).unwrap();
        assert_eq!(adv.values, vec![-2.0, 2.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn rank_midrank_ties() {
        let adv = rank_advantage(&group(&[1.0, 1.0, 2.0])).unwrap();
        assert_eq!(adv.values, vec![-1.0, -1.0, 2.0]);
        assert_abs_diff_eq!(adv.values.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_all_tied_collapses_to_zero() {
        let adv = rank_advantage(&group(&[3.0, 3.0, 3.0, 3.0])).unwrap();
        for v in adv.values {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn soft_rank_hard_limit() {
        let adv = soft_rank_advantage(&group(&[0.0, 1.0]), 1e-6).unwrap();
        assert_abs_diff_eq!(adv.values[0], -2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(adv.values[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn soft_rank_uniform_limit() {
        let adv = soft_rank_advantage(&group(&[0.0, 1.0]), 1e9).unwrap();
        assert_abs_diff_eq!(adv.values[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(adv.values[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn soft_rank_unit_temperature() {
        // rho_high = 1 + sigma(1) = 1.7310585786300049;
        // value = 2 - (2 - rho_high) * 4 = 0.9242343145200196
        let adv = soft_rank_advantage(&group(&[0.0, 1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(adv.values[0], -0.924_234_314_520_019_6, epsilon = 1e-12);
        assert_abs_diff_eq!(adv.values[1], 0.924_234_314_520_019_6, epsilon = 1e-12);
    }

    #[test]
    fn soft_rank_rejects_non_positive_temperature() {
        assert!(soft_rank_advantage(&group(&[0.0, 1.0]), 0.0).is_err());
        assert!(soft_rank_advantage(&group(&[0.0, 1.0]), -1.0).is_err());
    }

    #[test]
    fn soft_rank_tie_matches_midrank_in_limit() {
        let g = group(&[1.0, 1.0, 2.0]);
        let soft = soft_rank_advantage(&g, 1e-9).unwrap();
        let hard = rank_advantage(&g).unwrap();
        for (s, h) in soft.values.iter().zip(&hard.values) {
            assert_abs_diff_eq!(s, h, epsilon = 1e-9);
        }
    }

    #[test]
    fn broadcast_shapes() {
        let adv = AdvantageVector {
            values: vec![-2.0, 2.0],
            kind: AdvantageKind::Rank,
        };
        let m = broadcast(&adv, 3).unwrap();
        assert_eq!(m, vec![vec![-2.0, -2.0, -2.0], vec![2.0, 2.0, 2.0]]);

        let adv1 = AdvantageVector {
            values: vec![0.0],
            kind: AdvantageKind::Rank,
        };
        assert!(broadcast(&adv1, 2).is_err());

        let adv3 = AdvantageVector {
            values: vec![-1.0, -1.0, 2.0],
            kind: AdvantageKind::Rank,
        };
        assert_eq!(
            broadcast(&adv3, 1).unwrap(),
            vec![vec![-1.0], vec![-1.0], vec![2.0]]
        );
    }

    #[test]
    fn second_moment_identities_across_g() {
        let mut rng_state = 0x1234_5678_u64;
        let mut next = move || {
            // LCG is fine for no-tie test rewards
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for g in 2..=64usize {
            let rewards: Vec<f64> = (0..g).map(|_| next()).collect();
            let grp = RewardGroup::new(rewards, 0).unwrap();
            let z = z_score_advantage(&grp, 1e-12).unwrap();
            let r = rank_advantage(&grp).unwrap();
            let expected_rank = 4.0 * (g as f64 + 1.0) / (3.0 * (g as f64 - 1.0));
            assert_abs_diff_eq!(z.mean_square(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(r.mean_square(), expected_rank, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn zero_sum_all_kinds(
            rewards in proptest::collection::vec(-100.0f64..100.0, 2..32),
            temp in 0.01f64..100.0,
        ) {
            let grp = RewardGroup::new(rewards, 0).unwrap();
            let scale = grp.rewards.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1.0);
            for adv in [
                z_score_advantage(&grp, 1e-12).unwrap(),
                rank_advantage(&grp).unwrap(),
                soft_rank_advantage(&grp, temp).unwrap(),
            ] {
                let sum: f64 = adv.values.iter().sum();
                prop_assert!(sum.abs() <= 1e-12 * scale.max(adv.values.len() as f64));
            }
        }

        #[test]
        fn rank_order_isomorphism(
            rewards in proptest::collection::vec(-100.0f64..100.0, 2..24),
        ) {
            let grp = RewardGroup::new(rewards.clone(), 0).unwrap();
            let adv = rank_advantage(&grp).unwrap();
            for i in 0..rewards.len() {
                for j in 0..rewards.len() {
                    if rewards[i] > rewards[j] {
                        prop_assert!(adv.values[i] > adv.values[j]);
                    }
                }
            }
        }

        #[test]
        fn rank_monotone_transform_invariance(
            rewards in proptest::collection::vec(-10.0f64..10.0, 2..16),
        ) {
            let grp = RewardGroup::new(rewards.clone(), 0).unwrap();
            let base = rank_advantage(&grp).unwrap();
            // strictly increasing: x^3 + x (tie-preserving)
            let mapped: Vec<f64> = rewards.iter().map(|r| r.powi(3) + r).collect();
            let mapped_adv = rank_advantage(&RewardGroup::new(mapped, 0).unwrap()).unwrap();
            prop_assert_eq!(base.values, mapped_adv.values);
        }

        #[test]
        fn z_score_affine_invariance(
            rewards in proptest::collection::vec(-10.0f64..10.0, 2..16),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let base = z_score_advantage(&RewardGroup::new(rewards.clone(), 0).unwrap(), 1e-12).unwrap();
            let mapped: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
            let mapped_adv = z_score_advantage(&RewardGroup::new(mapped, 0).unwrap(), 1e-12).unwrap();
            for (x, y) in base.values.iter().zip(&mapped_adv.values) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn rank_values_bounded(
            rewards in proptest::collection::vec(-100.0f64..100.0, 2..32),
        ) {
            let grp = RewardGroup::new(rewards, 0).unwrap();
            let adv = rank_advantage(&grp).unwrap();
            for v in &adv.values {
                prop_assert!(*v >= -2.0 - 1e-12 && *v <= 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn soft_rank_distance_monotone_in_temperature() {
        let grp = group(&[0.1, 0.7, 0.3, 0.95, 0.5]);
        let hard = rank_advantage(&grp).unwrap();
        let temps = [0.01, 0.1, 0.5, 1.0, 5.0, 50.0];
        let mut prev = 0.0;
        for t in temps {
            let soft = soft_rank_advantage(&grp, t).unwrap();
            let dist: f64 = soft
                .values
                .iter()
                .zip(&hard.values)
                .map(|(s, h)| (s - h).abs())
                .sum();
            assert!(dist >= prev - 1e-9, "distance not monotone at T={t}");
            prev = dist;
        }
    }
}
