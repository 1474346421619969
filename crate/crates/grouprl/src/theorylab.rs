//! Controlled numerical verification of the advantage second-moment
//! identities, the gradient-variance inflation ratio, the bounded vs
//! sqrt(log G) max-advantage scaling, and the KL-trajectory echo, plus
//! a finite-difference oracle for the analytic objective gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{rank_advantage, z_score_advantage, AdvantageKind, RewardGroup};
use crate::objective::{self, ObjectiveConfig, StepBatch};
use crate::policy::{standard_normal, SequencePolicy};
use crate::seeding::{stream, substream};
use crate::trainer::RunLog;
use crate::{Error, Result};

/// The rank/z-score gradient second-moment inflation ratio,
/// 4(G+1)/(3(G-1)).
pub fn inflation_ratio_formula(group_size: usize) -> f64 {
    let g = group_size as f64;
    4.0 * (g + 1.0) / (3.0 * (g - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardDistribution {
    GaussianIid,
    UniformIid,
}

impl RewardDistribution {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            RewardDistribution::GaussianIid => standard_normal(rng),
            RewardDistribution::UniformIid => rng.random(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InflationExperiment {
    pub group_size: usize,
    pub feature_dim: usize,
    pub feature_sigma: f64,
    pub n_trials: usize,
    pub reward_distribution: RewardDistribution,
    pub seed: u64,
}

/// Empirical advantage second moments on one random no-tie group:
/// returns ((1/G) sum A_std^2, (1/G) sum A_rank^2). Continuous rewards
/// make ties a null event, so the identities hold exactly.
pub fn lemma_second_moments(group_size: usize, seed: u64) -> (f64, f64) {
    let mut rng = substream(seed, &[stream::THEORY, 1, group_size as u64]);
    let rewards: Vec<f64> = (0..group_size).map(|_| standard_normal(&mut rng)).collect();
    let group = RewardGroup::new(rewards, 0).unwrap();
    let z = z_score_advantage(&group, 1e-300).unwrap();
    let r = rank_advantage(&group).unwrap();
    (z.mean_square(), r.mean_square())
}

/// Monte Carlo estimate of E||xi_rank||^2 / E||xi_zscore||^2 where
/// xi = (1/G) sum_i A_i X_i with iid zero-mean isotropic Gaussian
/// features X_i, matching the conditional-orthogonality setup. Both
/// kinds reuse the same rewards and features per trial.
pub fn inflation_ratio_mc(exp: &InflationExperiment) -> f64 {
    let mut rng = substream(exp.seed, &[stream::THEORY, 2, exp.group_size as u64]);
    let mut sum_rank = 0.0;
    let mut sum_zscore = 0.0;
    let d = exp.feature_dim;
    let mut xi_rank = vec![0.0; d];
    let mut xi_zscore = vec![0.0; d];
    for _ in 0..exp.n_trials {
        let rewards: Vec<f64> = (0..exp.group_size)
            .map(|_| exp.reward_distribution.draw(&mut rng))
            .collect();
        let group = RewardGroup::new(rewards, 0).unwrap();
        let adv_rank = rank_advantage(&group).unwrap();
        let adv_zscore = z_score_advantage(&group, 1e-300).unwrap();

        xi_rank.iter_mut().for_each(|x| *x = 0.0);
        xi_zscore.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..exp.group_size {
            for k in 0..d {
                let feature = exp.feature_sigma * standard_normal(&mut rng);
                xi_rank[k] += adv_rank.values[i] * feature;
                xi_zscore[k] += adv_zscore.values[i] * feature;
            }
        }
        let g2 = (exp.group_size * exp.group_size) as f64;
        sum_rank += xi_rank.iter().map(|x| x * x).sum::<f64>() / g2;
        sum_zscore += xi_zscore.iter().map(|x| x * x).sum::<f64>() / g2;
    }
    sum_rank / sum_zscore
}

/// Per-G medians of max|A| under Gaussian rewards, for both kinds.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub group_size: usize,
    pub rank_median: f64,
    pub zscore_median: f64,
}

pub fn max_advantage_scaling(g_list: &[usize], n_trials: usize, seed: u64) -> Vec<ScalingPoint> {
    g_list
        .iter()
        .map(|&g| {
            let mut rng = substream(seed, &[stream::THEORY, 3, g as u64]);
            let mut rank_maxima = Vec::with_capacity(n_trials);
            let mut zscore_maxima = Vec::with_capacity(n_trials);
            for _ in 0..n_trials {
                let rewards: Vec<f64> = (0..g).map(|_| standard_normal(&mut rng)).collect();
                let group = RewardGroup::new(rewards, 0).unwrap();
                let max_abs = |values: &[f64]| values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                rank_maxima.push(max_abs(&rank_advantage(&group).unwrap().values));
                zscore_maxima.push(max_abs(&z_score_advantage(&group, 1e-300).unwrap().values));
            }
            ScalingPoint {
                group_size: g,
                rank_median: median(&mut rank_maxima),
                zscore_median: median(&mut zscore_maxima),
            }
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 0 {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    } else {
        values[n / 2]
    }
}

/// Least-squares fit of y = c * sqrt(log G) through the origin;
/// returns (c, r_squared).
pub fn sqrt_log_fit(points: &[ScalingPoint]) -> (f64, f64) {
    let xs: Vec<f64> = points
        .iter()
        .map(|p| (p.group_size as f64).ln().sqrt())
        .collect();
    let ys: Vec<f64> = points.iter().map(|p| p.zscore_median).collect();
    let c = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>()
        / xs.iter().map(|x| x * x).sum::<f64>();
    let mean_y = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - c * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    (c, 1.0 - ss_res / ss_tot)
}

/// KL-echo statistic over paired arm runs: the fraction of matched
/// early steps (first half of each run) at which the rank arm's KL to
/// reference is at least the z-score arm's. Exact equality counts 0.5.
#[derive(Debug, Clone, Serialize)]
pub struct KlInflationReport {
    pub fraction: f64,
    pub ci_halfwidth: f64,
    pub n_steps: usize,
}

pub fn kl_inflation_check(paired_logs: &[(RunLog, RunLog)]) -> Result<KlInflationReport> {
    if paired_logs.is_empty() {
        return Err(Error::UnpairedLogs("no paired runs given".into()));
    }
    let mut wins = 0.0;
    let mut n = 0usize;
    for (rank_log, zscore_log) in paired_logs {
        if rank_log.records.len() != zscore_log.records.len() {
            return Err(Error::UnpairedLogs(format!(
                "log lengths differ: {} vs {}",
                rank_log.records.len(),
                zscore_log.records.len()
            )));
        }
        let half = rank_log.records.len() / 2;
        for (a, b) in rank_log.records[..half].iter().zip(&zscore_log.records[..half]) {
            if a.step != b.step {
                return Err(Error::UnpairedLogs(format!(
                    "step mismatch: {} vs {}",
                    a.step, b.step
                )));
            }
            wins += if a.kl_to_reference > b.kl_to_reference {
                1.0
            } else if a.kl_to_reference < b.kl_to_reference {
                0.0
            } else {
                0.5
            };
            n += 1;
        }
    }
    let fraction = if n == 0 { 0.5 } else { wins / n as f64 };
    let ci_halfwidth = if n == 0 {
        0.0
    } else {
        1.96 * (fraction * (1.0 - fraction) / n as f64).sqrt()
    };
    Ok(KlInflationReport {
        fraction,
        ci_halfwidth,
        n_steps: n,
    })
}

/// Finite-difference verification of the analytic objective gradient
/// at random points kept away from clip boundaries.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub n_points: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn gradient_check(n_points: usize, seed: u64) -> Result<GradCheckReport> {
    let (prompts, positions, vocab) = (4usize, 3usize, 5usize);
    let (batch_prompts, group_size) = (2usize, 4usize);
    let config = ObjectiveConfig {
        clip_epsilon: 0.2,
        kl_beta: 0.05,
        kl_mode: crate::objective::KlMode::Exact,
    };
    let mut init_rng = substream(seed, &[stream::THEORY, 4]);
    let old = SequencePolicy::random_init(prompts, positions, vocab, 0.8, &mut init_rng);
    let reference = SequencePolicy::random_init(prompts, positions, vocab, 0.8, &mut init_rng);

    let prompt_ids: Vec<usize> = vec![0, 2];
    let completions: Vec<_> = prompt_ids
        .iter()
        .enumerate()
        .map(|(b, &q)| {
            old.sample_completions(q, group_size, 1.0, &mut substream(seed, &[stream::THEORY, 5, b as u64]))
        })
        .collect::<Result<_>>()?;
    let advantages: Vec<_> = (0..batch_prompts)
        .map(|b| {
            let rewards: Vec<f64> = (0..group_size)
                .map(|i| ((b * group_size + i) as f64).sin() * 2.0)
                .collect();
            AdvantageKind::ZScore
                .transform(&RewardGroup::new(rewards, b).unwrap())
                .unwrap()
        })
        .collect();
    let batch = StepBatch {
        prompt_ids,
        completions,
        advantages,
        snapshot_old: &old,
        reference: &reference,
    };

    let h = 1e-5;
    let tolerance = 1e-5;
    let mut max_relative_error: f64 = 0.0;
    let mut point_rng = substream(seed, &[stream::THEORY, 6]);
    let mut accepted = 0usize;
    while accepted < n_points {
        let mut theta = old.clone();
        let noise: Vec<f64> = (0..theta.logits().len())
            .map(|_| 0.05 * standard_normal(&mut point_rng))
            .collect();
        theta.ascend(&noise, 1.0);
        if near_clip_boundary(&theta, &batch, config.clip_epsilon, 5e-3) {
            continue;
        }
        accepted += 1;

        let analytic = objective::objective_gradient(&theta, &batch, &config)?;
        let mut fd = vec![0.0; analytic.len()];
        for idx in 0..fd.len() {
            let mut plus = theta.logits().to_vec();
            plus[idx] += h;
            let mut minus = theta.logits().to_vec();
            minus[idx] -= h;
            let f_plus = objective::objective_value(
                &SequencePolicy::new(prompts, positions, vocab, plus)?,
                &batch,
                &config,
            )?;
            let f_minus = objective::objective_value(
                &SequencePolicy::new(prompts, positions, vocab, minus)?,
                &batch,
                &config,
            )?;
            fd[idx] = (f_plus - f_minus) / (2.0 * h);
        }
        let diff = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let relative = diff / objective::l2_norm(&analytic).max(1e-12);
        max_relative_error = max_relative_error.max(relative);
    }
    Ok(GradCheckReport {
        n_points,
        max_relative_error,
        tolerance,
        pass: max_relative_error < tolerance,
    })
}

fn near_clip_boundary(
    theta: &SequencePolicy,
    batch: &StepBatch,
    clip_epsilon: f64,
    margin: f64,
) -> bool {
    for (b, &prompt) in batch.prompt_ids.iter().enumerate() {
        for completion in &batch.completions[b] {
            let log_new = theta.per_token_log_probs(prompt, &completion.tokens).unwrap();
            for (t, &lp) in log_new.iter().enumerate() {
                let ratio = (lp - completion.per_token_logprob_old[t]).exp();
                if (ratio - (1.0 - clip_epsilon)).abs() < margin
                    || (ratio - (1.0 + clip_epsilon)).abs() < margin
                {
                    return true;
                }
            }
        }
    }
    false
}
