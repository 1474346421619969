//! KL-penalized clipped surrogate objective and its analytic gradient.
//!
//! The surrogate averages min(ratio * A, clip(ratio, 1 +/- eps) * A)
//! over prompts, completions, and tokens, with the per-completion
//! advantage broadcast across tokens; the penalty subtracts
//! beta * KL(pi_theta || pi_ref), either exactly (closed-form for the
//! categorical policy) or via the per-token k3 estimator.
//!
//! Non-smooth conventions: where the min ties or the ratio sits exactly
//! on a clip boundary, the unclipped branch's derivative is used; where
//! the clipped branch is active and constant, its contribution is 0.

use serde::{Deserialize, Serialize};

use crate::advantage::AdvantageVector;
use crate::policy::{log_softmax, softmax, Completion, SequencePolicy};
use crate::{Error, Result};

/// How the KL penalty term is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    Exact,
    SampledK3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub kl_mode: KlMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            kl_mode: KlMode::Exact,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kl_beta must be non-negative, got {}",
                self.kl_beta
            )));
        }
        Ok(())
    }
}

/// One training step's sampled data: B prompts, G completions each,
/// their advantage vectors, and the frozen snapshot/reference policies.
#[derive(Debug)]
pub struct StepBatch<'a> {
    pub prompt_ids: Vec<usize>,
    pub completions: Vec<Vec<Completion>>,
    pub advantages: Vec<AdvantageVector>,
    pub snapshot_old: &'a SequencePolicy,
    pub reference: &'a SequencePolicy,
}

impl StepBatch<'_> {
    pub fn validate(&self) -> Result<()> {
        let b = self.prompt_ids.len();
        if b == 0 {
            return Err(Error::EmptyPromptSet);
        }
        if self.completions.len() != b || self.advantages.len() != b {
            return Err(Error::InvalidConfig(format!(
                "batch shapes inconsistent: {} prompts, {} completion groups, {} advantage vectors",
                b,
                self.completions.len(),
                self.advantages.len()
            )));
        }
        if self.snapshot_old.shape() != self.reference.shape() {
            let (q, t, v) = self.snapshot_old.shape();
            let (q2, t2, v2) = self.reference.shape();
            return Err(Error::ShapeMismatch(q, t, v, q2, t2, v2));
        }
        for (group, adv) in self.completions.iter().zip(&self.advantages) {
            if group.len() != adv.values.len() {
                return Err(Error::InvalidConfig(format!(
                    "group of {} completions with {} advantages",
                    group.len(),
                    adv.values.len()
                )));
            }
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.completions.first().map_or(0, Vec::len)
    }

    pub fn token_count(&self) -> usize {
        self.completions
            .first()
            .and_then(|g| g.first())
            .map_or(0, |c| c.tokens.len())
    }
}

/// Likelihood ratio of one token: exp(log pi_theta - log pi_old),
/// with log pi_old the value recorded at sampling time.
pub fn token_ratio(
    theta: &SequencePolicy,
    batch: &StepBatch,
    b: usize,
    i: usize,
    t: usize,
) -> Result<f64> {
    let prompt = batch.prompt_ids[b];
    let completion = &batch.completions[b][i];
    let log_new = theta.per_token_log_probs(prompt, &completion.tokens)?[t];
    Ok((log_new - completion.per_token_logprob_old[t]).exp())
}

/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A).
pub fn clipped_term(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// The clipped surrogate: (1/B) sum_b (1/G) sum_i (1/T) sum_t of the
/// clipped term with broadcast advantages.
pub fn surrogate_value(theta: &SequencePolicy, batch: &StepBatch, config: &ObjectiveConfig) -> Result<f64> {
    config.validate()?;
    batch.validate()?;
    let b_count = batch.prompt_ids.len();
    let mut total = 0.0;
    for b in 0..b_count {
        let prompt = batch.prompt_ids[b];
        let group = &batch.completions[b];
        let g = group.len() as f64;
        let mut group_sum = 0.0;
        for (i, completion) in group.iter().enumerate() {
            let advantage = batch.advantages[b].values[i];
            let log_new = theta.per_token_log_probs(prompt, &completion.tokens)?;
            let t_count = completion.tokens.len() as f64;
            let mut token_sum = 0.0;
            for (t, &lp) in log_new.iter().enumerate() {
                let ratio = (lp - completion.per_token_logprob_old[t]).exp();
                token_sum += clipped_term(ratio, advantage, config.clip_epsilon);
            }
            group_sum += token_sum / t_count;
        }
        total += group_sum / g;
    }
    Ok(total / b_count as f64)
}

fn kl_penalty_terms(theta: &SequencePolicy, batch: &StepBatch, mode: KlMode) -> Result<Vec<f64>> {
    match mode {
        KlMode::Exact => batch
            .prompt_ids
            .iter()
            .map(|&prompt| theta.exact_kl(batch.reference, prompt))
            .collect(),
        KlMode::SampledK3 => {
            // k3 = r - log r - 1 with r = pi_ref / pi_theta, averaged
            // over completions and summed over positions.
            let mut out = Vec::with_capacity(batch.prompt_ids.len());
            for (b, &prompt) in batch.prompt_ids.iter().enumerate() {
                let group = &batch.completions[b];
                let mut sum = 0.0;
                for completion in group {
                    let log_theta = theta.per_token_log_probs(prompt, &completion.tokens)?;
                    let log_ref = batch
                        .reference
                        .per_token_log_probs(prompt, &completion.tokens)?;
                    for t in 0..completion.tokens.len() {
                        let log_r = log_ref[t] - log_theta[t];
                        sum += log_r.exp() - log_r - 1.0;
                    }
                }
                out.push(sum / group.len() as f64);
            }
            Ok(out)
        }
    }
}

/// Full objective: surrogate minus beta times the mean per-prompt KL.
pub fn objective_value(theta: &SequencePolicy, batch: &StepBatch, config: &ObjectiveConfig) -> Result<f64> {
    let surrogate = surrogate_value(theta, batch, config)?;
    if config.kl_beta == 0.0 {
        return Ok(surrogate);
    }
    let kls = kl_penalty_terms(theta, batch, config.kl_mode)?;
    let mean_kl = kls.iter().sum::<f64>() / kls.len() as f64;
    Ok(surrogate - config.kl_beta * mean_kl)
}

/// Analytic gradient of `objective_value` with respect to theta's
/// logits, flat and shaped like the logit tensor. Per-prompt terms are
/// accumulated in ascending batch index order.
pub fn objective_gradient(
    theta: &SequencePolicy,
    batch: &StepBatch,
    config: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    batch.validate()?;
    let (_, positions, vocab) = theta.shape();
    let b_count = batch.prompt_ids.len();
    let mut grad = vec![0.0; theta.logits().len()];

    for b in 0..b_count {
        let prompt = batch.prompt_ids[b];
        let group = &batch.completions[b];
        let g = group.len() as f64;

        // Softmax probabilities per position, shared across the group.
        let probs: Vec<Vec<f64>> = (0..positions)
            .map(|t| softmax(theta.slice(prompt, t)))
            .collect();
        let logp: Vec<Vec<f64>> = (0..positions)
            .map(|t| log_softmax(theta.slice(prompt, t)))
            .collect();

        for (i, completion) in group.iter().enumerate() {
            let advantage = batch.advantages[b].values[i];
            let t_count = completion.tokens.len() as f64;
            for (t, &token) in completion.tokens.iter().enumerate() {
                let ratio = (logp[t][token] - completion.per_token_logprob_old[t]).exp();
                let clipped = ratio.clamp(1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon);
                // Tie goes to the unclipped branch; an active clipped
                // branch is constant in theta, so it contributes 0.
                if ratio * advantage <= clipped * advantage {
                    let coeff = advantage * ratio / (b_count as f64 * g * t_count);
                    let base = (prompt * positions + t) * vocab;
                    for v in 0..vocab {
                        grad[base + v] -= coeff * probs[t][v];
                    }
                    grad[base + token] += coeff;
                }
            }
        }

        if config.kl_beta > 0.0 {
            match config.kl_mode {
                KlMode::Exact => {
                    // d KL_t / d z_w = p_w (log p_w - log ref_w - KL_t)
                    for t in 0..positions {
                        let log_ref = log_softmax(batch.reference.slice(prompt, t));
                        let kl_t: f64 = (0..vocab)
                            .map(|v| probs[t][v] * (logp[t][v] - log_ref[v]))
                            .sum();
                        let base = (prompt * positions + t) * vocab;
                        for v in 0..vocab {
                            grad[base + v] -= config.kl_beta / b_count as f64
                                * probs[t][v]
                                * (logp[t][v] - log_ref[v] - kl_t);
                        }
                    }
                }
                KlMode::SampledK3 => {
                    // d k3 / d z_w = (1 - r) (1{w = token} - p_w)
                    for completion in group {
                        let log_ref = batch
                            .reference
                            .per_token_log_probs(prompt, &completion.tokens)?;
                        for (t, &token) in completion.tokens.iter().enumerate() {
                            let r = (log_ref[t] - logp[t][token]).exp();
                            let coeff = -config.kl_beta * (1.0 - r) / (b_count as f64 * g);
                            let base = (prompt * positions + t) * vocab;
                            for v in 0..vocab {
                                grad[base + v] -= coeff * probs[t][v];
                            }
                            grad[base + token] += coeff;
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Euclidean norm of a flat gradient.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
