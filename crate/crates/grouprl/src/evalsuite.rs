//! Evaluation protocol: held-out validation reward, oracle-judged
//! paired win-rates with multi-seed confidence intervals, matched-step
//! comparison tables, and the efficiency-crossing statistic.
//!
//! The judge is the latent quality oracle: for a pair of completions
//! the one with the higher latent score wins, exact ties count 0.5.

use serde::Serialize;

use crate::policy::SequencePolicy;
use crate::rewardsim::{LatentQuality, MiscalibrationProfile};
use crate::seeding::substream;
use crate::trainer::RunLog;
use crate::{Error, Result};

/// Mean over held-out prompts of the per-prompt mean reward of G fresh
/// completions; the same formula as the training reward, on prompts
/// disjoint from the training pool. Per-prompt randomness is keyed by
/// prompt id, so the result is invariant to prompt order.
#[allow(clippy::too_many_arguments)]
pub fn validation_reward(
    policy: &SequencePolicy,
    val_prompt_ids: &[usize],
    train_prompt_ids: &[usize],
    profile: &MiscalibrationProfile,
    latent: &LatentQuality,
    group_size: usize,
    temperature: f64,
    seed: u64,
) -> Result<f64> {
    if val_prompt_ids.is_empty() {
        return Err(Error::EmptyPromptSet);
    }
    if let Some(&overlap) = val_prompt_ids.iter().find(|p| train_prompt_ids.contains(p)) {
        return Err(Error::PromptPoolOverlap(overlap));
    }
    let mut total = 0.0;
    for &prompt in val_prompt_ids {
        let completions = policy.sample_completions(
            prompt,
            group_size,
            temperature,
            &mut substream(seed, &[0, prompt as u64]),
        )?;
        let group = profile.group_score(
            latent,
            prompt,
            &completions,
            &mut substream(seed, &[1, prompt as u64]),
        )?;
        total += group.rewards.iter().sum::<f64>() / group.rewards.len() as f64;
    }
    Ok(total / val_prompt_ids.len() as f64)
}

/// One win-rate measurement: a's win fraction against b, aggregated
/// over seeds, with a normal-approximation CI over the per-seed means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRateRecord {
    pub step: Option<usize>,
    pub temperature: f64,
    pub win_rate: f64,
    pub ci_halfwidth: f64,
    pub n_prompts: usize,
    pub n_seeds: usize,
}

/// Paired oracle win-rate of `policy_a` against `policy_b`. For each
/// (seed, prompt) both policies generate one completion at the given
/// temperature from the SAME sub-stream, so identical policies tie
/// exactly. Winner is the higher latent score; ties count 0.5.
pub fn oracle_win_rate(
    policy_a: &SequencePolicy,
    policy_b: &SequencePolicy,
    prompt_ids: &[usize],
    latent: &LatentQuality,
    temperature: f64,
    n_seeds: usize,
    seed: u64,
) -> Result<WinRateRecord> {
    if prompt_ids.is_empty() {
        return Err(Error::EmptyPromptSet);
    }
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveSamplingTemperature(temperature));
    }
    let mut per_seed = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let mut wins = 0.0;
        for &prompt in prompt_ids {
            let comp_a = policy_a
                .sample_completions(prompt, 1, temperature, &mut substream(seed, &[s as u64, prompt as u64]))?
                .pop()
                .unwrap();
            let comp_b = policy_b
                .sample_completions(prompt, 1, temperature, &mut substream(seed, &[s as u64, prompt as u64]))?
                .pop()
                .unwrap();
            let score_a = latent.latent_score(prompt, &comp_a.tokens)?;
            let score_b = latent.latent_score(prompt, &comp_b.tokens)?;
            wins += if score_a > score_b {
                1.0
            } else if score_a < score_b {
                0.0
            } else {
                0.5
            };
        }
        per_seed.push(wins / prompt_ids.len() as f64);
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let ci_halfwidth = if per_seed.len() > 1 {
        let var = per_seed.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(WinRateRecord {
        step: None,
        temperature,
        win_rate: mean,
        ci_halfwidth,
        n_prompts: prompt_ids.len(),
        n_seeds,
    })
}

/// Win-rate table over matched checkpoints and temperatures; a missing
/// checkpoint on either side leaves an explicit gap in the cell.
#[derive(Debug, Clone, Serialize)]
pub struct WinRateTable {
    pub temperatures: Vec<f64>,
    pub rows: Vec<WinRateRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WinRateRow {
    pub step: usize,
    pub cells: Vec<Option<WinRateRecord>>,
}

impl WinRateTable {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("# grouprl-winrate v1\nstep");
        for t in &self.temperatures {
            out.push_str(&format!(",tau_{t:?}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.step.to_string());
            for cell in &row.cells {
                match cell {
                    Some(r) => out.push_str(&format!(",{:?}", r.win_rate)),
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the matched-step table: for each checkpoint step present in
/// `checkpoint_steps` and each temperature, the oracle win-rate of arm
/// a's checkpoint against arm b's at the identical step.
#[allow(clippy::too_many_arguments)]
pub fn matched_step_table(
    checkpoints_a: &[(usize, SequencePolicy)],
    checkpoints_b: &[(usize, SequencePolicy)],
    checkpoint_steps: &[usize],
    prompt_ids: &[usize],
    latent: &LatentQuality,
    temperatures: &[f64],
    n_seeds: usize,
    seed: u64,
) -> Result<WinRateTable> {
    let find = |ckpts: &[(usize, SequencePolicy)], step: usize| {
        ckpts
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, p)| p.clone())
    };
    let mut rows = Vec::with_capacity(checkpoint_steps.len());
    for &step in checkpoint_steps {
        let a = find(checkpoints_a, step);
        let b = find(checkpoints_b, step);
        let mut cells = Vec::with_capacity(temperatures.len());
        for &tau in temperatures {
            match (&a, &b) {
                (Some(pa), Some(pb)) => {
                    let mut record =
                        oracle_win_rate(pa, pb, prompt_ids, latent, tau, n_seeds, seed)?;
                    record.step = Some(step);
                    cells.push(Some(record));
                }
                _ => cells.push(None),
            }
        }
        rows.push(WinRateRow { step, cells });
    }
    Ok(WinRateTable {
        temperatures: temperatures.to_vec(),
        rows,
    })
}

/// Smallest step in `challenger`'s log whose validation reward reaches
/// the best validation reward anywhere in `incumbent`'s log; absent if
/// never reached.
pub fn efficiency_crossing(challenger: &RunLog, incumbent: &RunLog) -> Option<usize> {
    let best = incumbent
        .records
        .iter()
        .map(|r| r.val_reward)
        .fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    challenger
        .records
        .iter()
        .find(|r| r.val_reward >= best)
        .map(|r| r.step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::StepRecord;
    use approx::assert_abs_diff_eq;

    fn log_from_vals(vals: &[f64]) -> RunLog {
        RunLog {
            records: vals
                .iter()
                .enumerate()
                .map(|(i, &v)| StepRecord {
                    step: i + 1,
                    mean_train_reward: 0.0,
                    val_reward: v,
                    kl_to_reference: 0.0,
                    gradient_norm: 0.0,
                    advantage_mean_square: 0.0,
                    stopped_at_budget: false,
                    prompt_ids: vec![],
                })
                .collect(),
        }
    }

    fn latent_and_policy(seed: u64) -> (LatentQuality, SequencePolicy) {
        let latent = LatentQuality::random(8, 3, 6, &mut substream(seed, &[0]));
        let policy = SequencePolicy::random_init(8, 3, 6, 0.5, &mut substream(seed, &[1]));
        (latent, policy)
    }

    #[test]
    fn validation_rejects_overlap_and_empty() {
        let (latent, policy) = latent_and_policy(201);
        let profile = MiscalibrationProfile::identity();
        assert!(matches!(
            validation_reward(&policy, &[1, 2], &[2, 3], &profile, &latent, 4, 1.0, 7),
            Err(Error::PromptPoolOverlap(2))
        ));
        assert!(matches!(
            validation_reward(&policy, &[], &[0], &profile, &latent, 4, 1.0, 7),
            Err(Error::EmptyPromptSet)
        ));
    }

    #[test]
    fn validation_reward_order_invariant_and_deterministic() {
        let (latent, policy) = latent_and_policy(203);
        let profile = MiscalibrationProfile::identity();
        let a = validation_reward(&policy, &[5, 6, 7], &[0, 1], &profile, &latent, 4, 1.0, 9).unwrap();
        let b = validation_reward(&policy, &[7, 5, 6], &[0, 1], &profile, &latent, 4, 1.0, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reference_on_symmetric_table_scores_near_zero() {
        // zero-mean latent entries and a uniform policy: expected
        // per-completion score is 0
        let (latent, _) = latent_and_policy(207);
        let uniform = SequencePolicy::zeros(8, 3, 6);
        let profile = MiscalibrationProfile::identity();
        let n = 1000;
        let r = validation_reward(&uniform, &[0], &[], &profile, &latent, n, 1.0, 11).unwrap();
        // per-completion variance ~ positions * mean table variance;
        // bound loosely at 3 sigma with variance 3 * 2
        let sigma = (6.0f64 / n as f64).sqrt();
        assert!(r.abs() < 3.0 * sigma * 3.0, "reward {r} too far from 0");
    }

    #[test]
    fn deterministic_policy_on_argmax_scores_table_maxima() {
        let (latent, _) = latent_and_policy(209);
        let argmax = latent.argmax_tokens(2);
        let mut logits = vec![0.0; 8 * 3 * 6];
        for (t, &token) in argmax.iter().enumerate() {
            logits[(2 * 3 + t) * 6 + token] = 200.0;
        }
        let policy = SequencePolicy::new(8, 3, 6, logits).unwrap();
        let profile = MiscalibrationProfile::identity();
        let expected: f64 = (0..3).map(|t| latent.entry(2, t, argmax[t])).collect::<Vec<_>>().iter().sum();
        let r = validation_reward(&policy, &[2], &[], &profile, &latent, 4, 1.0, 13).unwrap();
        assert_abs_diff_eq!(r, expected, epsilon = 1e-12);
    }

    #[test]
    fn identical_policies_tie_exactly() {
        let (latent, policy) = latent_and_policy(211);
        let record =
            oracle_win_rate(&policy, &policy, &[0, 1, 2, 3], &latent, 0.5, 4, 17).unwrap();
        assert_eq!(record.win_rate, 0.5);
        assert_eq!(record.ci_halfwidth, 0.0);
    }

    #[test]
    fn dominant_policy_wins() {
        let latent = LatentQuality::random(200, 3, 6, &mut substream(213, &[0]));
        let mut logits = vec![0.0; 200 * 3 * 6];
        for q in 0..200 {
            for (t, &token) in latent.argmax_tokens(q).iter().enumerate() {
                logits[(q * 3 + t) * 6 + token] = 200.0;
            }
        }
        let argmax_policy = SequencePolicy::new(200, 3, 6, logits).unwrap();
        let uniform = SequencePolicy::zeros(200, 3, 6);
        let prompts: Vec<usize> = (0..200).collect();
        let record =
            oracle_win_rate(&argmax_policy, &uniform, &prompts, &latent, 0.5, 2, 19).unwrap();
        assert!(record.win_rate >= 0.95, "win rate {}", record.win_rate);
    }

    #[test]
    fn win_rate_antisymmetry() {
        let (latent, policy_a) = latent_and_policy(217);
        let policy_b = SequencePolicy::random_init(8, 3, 6, 0.5, &mut substream(218, &[0]));
        let prompts = [0, 2, 4, 6];
        let ab = oracle_win_rate(&policy_a, &policy_b, &prompts, &latent, 0.9, 3, 21).unwrap();
        let ba = oracle_win_rate(&policy_b, &policy_a, &prompts, &latent, 0.9, 3, 21).unwrap();
        assert_abs_diff_eq!(ab.win_rate, 1.0 - ba.win_rate, epsilon = 1e-15);
    }

    #[test]
    fn table_shape_and_gaps() {
        let (latent, policy) = latent_and_policy(219);
        let other = SequencePolicy::random_init(8, 3, 6, 0.5, &mut substream(220, &[0]));
        let a = vec![(25, policy.clone()), (50, policy.clone())];
        let b = vec![(25, other)];
        let table = matched_step_table(
            &a,
            &b,
            &[25, 50],
            &[0, 1, 2],
            &latent,
            &[0.1, 0.5, 0.9],
            2,
            23,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].cells.len(), 3);
        assert!(table.rows[0].cells.iter().all(Option::is_some));
        assert!(table.rows[1].cells.iter().all(Option::is_none));
        let csv = table.to_csv_string();
        assert!(csv.contains("step,tau_0.1,tau_0.5,tau_0.9"));
        assert!(csv.contains("NA"));
    }

    #[test]
    fn step_zero_checkpoints_tie() {
        let (latent, policy) = latent_and_policy(221);
        let a = vec![(0, policy.clone())];
        let b = vec![(0, policy)];
        let table =
            matched_step_table(&a, &b, &[0], &[0, 1], &latent, &[0.1, 0.5, 0.9], 2, 29).unwrap();
        for cell in &table.rows[0].cells {
            assert_eq!(cell.as_ref().unwrap().win_rate, 0.5);
        }
    }

    #[test]
    fn efficiency_crossing_scans() {
        let gopo = log_from_vals(&[1.0, 3.0, 5.0]);
        let grpo = log_from_vals(&[2.0, 2.0, 4.0]);
        assert_eq!(efficiency_crossing(&gopo, &grpo), Some(3));

        let gopo2 = log_from_vals(&[1.0, 3.0, 4.0]);
        assert_eq!(efficiency_crossing(&gopo2, &grpo), Some(3));

        let shared = log_from_vals(&[1.0, 7.0, 4.0]);
        assert_eq!(efficiency_crossing(&shared, &shared), Some(2));

        let below = log_from_vals(&[0.1, 0.2, 0.3]);
        assert_eq!(efficiency_crossing(&below, &grpo), None);
    }

    #[test]
    fn ci_shrinks_with_seed_count() {
        // resampled synthetic data: policies differ, so per-seed means
        // fluctuate; the CI halfwidth should shrink like 1/sqrt(n)
        let (latent, policy_a) = latent_and_policy(223);
        let policy_b = SequencePolicy::random_init(8, 3, 6, 0.5, &mut substream(224, &[0]));
        let prompts = [0, 1, 2, 3, 4, 5];
        let mut widths = Vec::new();
        for &n_seeds in &[4usize, 16, 64] {
            // average the halfwidth over replicates to beat sampling noise
            let mut acc = 0.0;
            let reps = 30;
            for rep in 0..reps {
                let r = oracle_win_rate(
                    &policy_a,
                    &policy_b,
                    &prompts,
                    &latent,
                    0.9,
                    n_seeds,
                    1000 + rep,
                )
                .unwrap();
                acc += r.ci_halfwidth;
            }
            widths.push(acc / reps as f64);
        }
        // expect w(4)/w(16) approx 2 and w(16)/w(64) approx 2, within 20%
        for pair in widths.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!(
                (ratio - 2.0).abs() < 0.4,
                "halfwidth ratio {ratio} not near 2: {widths:?}"
            );
        }
    }
}
