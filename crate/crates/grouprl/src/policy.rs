//! Differentiable categorical sequence policy.
//!
//! Per prompt and position the policy holds a vector of V logits; the
//! conditional at (q, t) is softmax(logits[q][t]) and is independent of
//! the sampled prefix, which keeps log-probabilities, their gradients,
//! and the KL to another policy closed-form.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// One sampled token sequence plus its per-token log-probs under the
/// sampling-time policy (always the untempered, tau = 1 distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<usize>,
    pub per_token_logprob_old: Vec<f64>,
}

/// Categorical sequence policy with logits indexed [prompt][position][token].
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePolicy {
    logits: Vec<f64>,
    prompts: usize,
    positions: usize,
    vocab: usize,
}

impl SequencePolicy {
    pub fn new(prompts: usize, positions: usize, vocab: usize, logits: Vec<f64>) -> Result<Self> {
        assert!(prompts > 0 && positions > 0 && vocab > 0);
        assert_eq!(logits.len(), prompts * positions * vocab);
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLogit(i));
        }
        Ok(Self {
            logits,
            prompts,
            positions,
            vocab,
        })
    }

    pub fn zeros(prompts: usize, positions: usize, vocab: usize) -> Self {
        Self::new(prompts, positions, vocab, vec![0.0; prompts * positions * vocab]).unwrap()
    }

    /// Gaussian-initialized logits, deterministic given the generator.
    pub fn random_init(
        prompts: usize,
        positions: usize,
        vocab: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let logits = (0..prompts * positions * vocab)
            .map(|_| scale * standard_normal(rng))
            .collect();
        Self::new(prompts, positions, vocab, logits).unwrap()
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.prompts, self.positions, self.vocab)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn flat(&self, prompt: usize, position: usize) -> usize {
        (prompt * self.positions + position) * self.vocab
    }

    /// The logit slice at (prompt, position).
    pub fn slice(&self, prompt: usize, position: usize) -> &[f64] {
        let base = self.flat(prompt, position);
        &self.logits[base..base + self.vocab]
    }

    fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.prompts {
            return Err(Error::PromptOutOfRange {
                prompt,
                count: self.prompts,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.positions {
            return Err(Error::LengthMismatch {
                got: tokens.len(),
                expected: self.positions,
            });
        }
        for &token in tokens {
            if token >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    token,
                    vocab: self.vocab,
                });
            }
        }
        Ok(())
    }

    /// In-place gradient-ascent update: logits += step * gradient.
    pub fn ascend(&mut self, gradient: &[f64], step: f64) {
        assert_eq!(gradient.len(), self.logits.len());
        for (l, g) in self.logits.iter_mut().zip(gradient) {
            *l += step * g;
        }
    }

    /// Samples G completions for one prompt. Tokens are drawn per
    /// position from softmax(logits / temperature); the stored
    /// log-probs are always under the tau = 1 distribution, since the
    /// surrogate's ratios use the untempered policies and the sampling
    /// temperature affects exploration only.
    pub fn sample_completions(
        &self,
        prompt_id: usize,
        group_size: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Completion>> {
        if !(temperature > 0.0) {
            return Err(Error::NonPositiveSamplingTemperature(temperature));
        }
        self.check_prompt(prompt_id)?;

        // Per-position tempered probabilities and untempered log-probs.
        let mut tempered = Vec::with_capacity(self.positions);
        let mut untempered_log = Vec::with_capacity(self.positions);
        for t in 0..self.positions {
            let slice = self.slice(prompt_id, t);
            let scaled: Vec<f64> = slice.iter().map(|l| l / temperature).collect();
            tempered.push(softmax(&scaled));
            untempered_log.push(log_softmax(slice));
        }

        let mut out = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let mut tokens = Vec::with_capacity(self.positions);
            let mut logprobs = Vec::with_capacity(self.positions);
            for t in 0..self.positions {
                let token = sample_categorical(&tempered[t], rng);
                tokens.push(token);
                logprobs.push(untempered_log[t][token]);
            }
            out.push(Completion {
                tokens,
                per_token_logprob_old: logprobs,
            });
        }
        Ok(out)
    }

    /// Total log-probability of a token sequence for one prompt.
    pub fn log_prob(&self, prompt_id: usize, tokens: &[usize]) -> Result<f64> {
        self.check_prompt(prompt_id)?;
        self.check_tokens(tokens)?;
        let mut total = 0.0;
        for (t, &token) in tokens.iter().enumerate() {
            total += log_softmax(self.slice(prompt_id, t))[token];
        }
        Ok(total)
    }

    /// Per-token log-probabilities of a sequence.
    pub fn per_token_log_probs(&self, prompt_id: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_prompt(prompt_id)?;
        self.check_tokens(tokens)?;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(t, &token)| log_softmax(self.slice(prompt_id, t))[token])
            .collect())
    }

    /// Analytic gradient of `log_prob` with respect to the logits,
    /// shaped like the logit tensor. The slice at (prompt_id, t, v) is
    /// 1{v = tokens_t} - softmax(logits[q][t])[v]; all other prompts
    /// and positions are zero.
    pub fn grad_log_prob(&self, prompt_id: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_prompt(prompt_id)?;
        self.check_tokens(tokens)?;
        let mut grad = vec![0.0; self.logits.len()];
        for (t, &token) in tokens.iter().enumerate() {
            let probs = softmax(self.slice(prompt_id, t));
            let base = self.flat(prompt_id, t);
            for v in 0..self.vocab {
                grad[base + v] = -probs[v];
            }
            grad[base + token] += 1.0;
        }
        Ok(grad)
    }

    /// Exact categorical KL(self || other) for one prompt, summed over
    /// positions.
    pub fn exact_kl(&self, other: &SequencePolicy, prompt_id: usize) -> Result<f64> {
        if self.shape() != other.shape() {
            let (q, t, v) = self.shape();
            let (q2, t2, v2) = other.shape();
            return Err(Error::ShapeMismatch(q, t, v, q2, t2, v2));
        }
        self.check_prompt(prompt_id)?;
        let mut total = 0.0;
        for t in 0..self.positions {
            let log_p = log_softmax(self.slice(prompt_id, t));
            let log_q = log_softmax(other.slice(prompt_id, t));
            let mut kl = 0.0;
            for v in 0..self.vocab {
                kl += log_p[v].exp() * (log_p[v] - log_q[v]);
            }
            total += kl.max(0.0);
        }
        Ok(total)
    }

    /// Mean over all prompts of the per-prompt exact KL to `other`.
    pub fn mean_exact_kl(&self, other: &SequencePolicy) -> Result<f64> {
        let mut total = 0.0;
        for q in 0..self.prompts {
            total += self.exact_kl(other, q)?;
        }
        Ok(total / self.prompts as f64)
    }

    /// Serializes to the text checkpoint format: a format line, a shape
    /// line `Q T V`, then one logit per line (shortest round-trip
    /// decimal representation).
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "grouprl-policy v1").unwrap();
        writeln!(out, "{} {} {}", self.prompts, self.positions, self.vocab).unwrap();
        for l in &self.logits {
            writeln!(out, "{l:?}").unwrap();
        }
        out
    }

    pub fn from_checkpoint_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::CheckpointFormat("empty checkpoint".into()))?;
        if header != "grouprl-policy v1" {
            return Err(Error::CheckpointFormat(format!("bad header: {header}")));
        }
        let shape_line = lines
            .next()
            .ok_or_else(|| Error::CheckpointFormat("missing shape line".into()))?;
        let dims: Vec<usize> = shape_line
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::CheckpointFormat(format!("bad shape entry: {s}")))
            })
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::CheckpointFormat(format!("bad shape line: {shape_line}")));
        }
        let (q, t, v) = (dims[0], dims[1], dims[2]);
        let logits: Vec<f64> = lines
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::CheckpointFormat(format!("bad logit: {s}")))
            })
            .collect::<Result<_>>()?;
        if logits.len() != q * t * v {
            return Err(Error::CheckpointFormat(format!(
                "expected {} logits, got {}",
                q * t * v,
                logits.len()
            )));
        }
        Self::new(q, t, v, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_string(&text)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .map(|l| (l - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|l| l - log_sum).collect()
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Box-Muller draw; kept local so the stream consumption per draw is a
/// fixed, documented two uniforms.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
