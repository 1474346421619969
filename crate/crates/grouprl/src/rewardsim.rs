//! Simulated reward models.
//!
//! A seeded latent table defines ground-truth quality per (prompt,
//! position, token); a miscalibration profile wraps it in a strictly
//! increasing distortion plus additive noise and optional pairwise
//! order flips. Relative comparisons survive any zero-noise profile;
//! magnitudes do not, which is the failure mode the advantage
//! transforms are compared under.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::advantage::RewardGroup;
use crate::policy::{standard_normal, Completion};
use crate::{Error, Result};

/// Ground-truth per-token quality values; a completion's latent score
/// is the sum of its tokens' table entries.
#[derive(Debug, Clone)]
pub struct LatentQuality {
    table: Vec<f64>,
    prompts: usize,
    positions: usize,
    vocab: usize,
}

impl LatentQuality {
    /// Standard-Gaussian table, deterministic given the generator.
    pub fn random(prompts: usize, positions: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = (0..prompts * positions * vocab)
            .map(|_| standard_normal(rng))
            .collect();
        Self {
            table,
            prompts,
            positions,
            vocab,
        }
    }

    pub fn from_table(prompts: usize, positions: usize, vocab: usize, table: Vec<f64>) -> Self {
        assert_eq!(table.len(), prompts * positions * vocab);
        Self {
            table,
            prompts,
            positions,
            vocab,
        }
    }

    pub fn entry(&self, prompt: usize, position: usize, token: usize) -> f64 {
        self.table[(prompt * self.positions + position) * self.vocab + token]
    }

    /// Oracle quality of one completion: the sum of per-position table
    /// entries along the token sequence.
    pub fn latent_score(&self, prompt_id: usize, tokens: &[usize]) -> Result<f64> {
        if prompt_id >= self.prompts {
            return Err(Error::PromptOutOfRange {
                prompt: prompt_id,
                count: self.prompts,
            });
        }
        if tokens.len() != self.positions {
            return Err(Error::LengthMismatch {
                got: tokens.len(),
                expected: self.positions,
            });
        }
        let mut total = 0.0;
        for (t, &token) in tokens.iter().enumerate() {
            if token >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    token,
                    vocab: self.vocab,
                });
            }
            total += self.entry(prompt_id, t, token);
        }
        Ok(total)
    }

    /// Per-position argmax token sequence for one prompt.
    pub fn argmax_tokens(&self, prompt_id: usize) -> Vec<usize> {
        (0..self.positions)
            .map(|t| {
                (0..self.vocab)
                    .max_by(|&a, &b| {
                        self.entry(prompt_id, t, a)
                            .partial_cmp(&self.entry(prompt_id, t, b))
                            .unwrap()
                    })
                    .unwrap()
            })
            .collect()
    }
}

/// Strictly increasing reward distortions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum Distortion {
    Identity,
    Affine { scale: f64, shift: f64 },
    Sigmoid { scale: f64, gain: f64 },
    Cubic,
    /// Piecewise-linear with alternating steep and near-flat segments
    /// between the sorted knots; plateaus keep a small positive slope
    /// so the map stays strictly increasing.
    PlateauPiecewise { knots: Vec<f64> },
}

const PLATEAU_SLOPE: f64 = 0.05;
const STEEP_SLOPE: f64 = 1.0;

impl Distortion {
    pub fn validate(&self) -> Result<()> {
        match self {
            Distortion::Affine { scale, .. } if !(*scale > 0.0) => Err(Error::InvalidConfig(
                format!("affine scale must be positive, got {scale}"),
            )),
            Distortion::Sigmoid { scale, gain } if !(*scale > 0.0 && *gain > 0.0) => {
                Err(Error::InvalidConfig(format!(
                    "sigmoid scale and gain must be positive, got ({scale}, {gain})"
                )))
            }
            Distortion::PlateauPiecewise { knots } => {
                let mut sorted = knots.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::InvalidConfig("plateau knots must be distinct".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Distortion::Identity => x,
            Distortion::Affine { scale, shift } => scale * x + shift,
            Distortion::Sigmoid { scale, gain } => scale / (1.0 + (-gain * x).exp()),
            Distortion::Cubic => x * x * x,
            Distortion::PlateauPiecewise { knots } => {
                let mut sorted = knots.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                // Segment below the first knot is steep; slopes then
                // alternate plateau/steep at each knot crossing.
                let mut y = 0.0;
                let mut prev = f64::NEG_INFINITY;
                let mut slope = STEEP_SLOPE;
                for (i, &k) in sorted.iter().enumerate() {
                    if x <= k {
                        return y + slope * (x - if i == 0 { 0.0 } else { prev });
                    }
                    y += slope * (k - if i == 0 { 0.0 } else { prev });
                    prev = k;
                    slope = if slope == STEEP_SLOPE { PLATEAU_SLOPE } else { STEEP_SLOPE };
                }
                y + slope * (x - if sorted.is_empty() { 0.0 } else { prev })
            }
        }
    }
}

/// Additive reward-noise family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum NoiseKind {
    Gaussian,
    /// Heavy-tailed noise; `dof` controls the tail weight.
    StudentT { dof: f64 },
}

/// A reward model stand-in: distortion + noise + pairwise order flips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiscalibrationProfile {
    pub distortion: Distortion,
    pub noise_std: f64,
    #[serde(default = "default_noise_kind")]
    pub noise_kind: NoiseKind,
    pub flip_probability: f64,
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::Gaussian
}

impl MiscalibrationProfile {
    pub fn identity() -> Self {
        Self {
            distortion: Distortion::Identity,
            noise_std: 0.0,
            noise_kind: NoiseKind::Gaussian,
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.distortion.validate()?;
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if let NoiseKind::StudentT { dof } = self.noise_kind {
            if !(dof > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "student_t dof must be positive, got {dof}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.flip_probability) && self.flip_probability != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        Ok(())
    }

    fn noise_draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.noise_std == 0.0 {
            return 0.0;
        }
        match self.noise_kind {
            NoiseKind::Gaussian => self.noise_std * standard_normal(rng),
            NoiseKind::StudentT { dof } => {
                let t = StudentT::new(dof).expect("dof validated positive");
                self.noise_std * t.sample(rng)
            }
        }
    }

    /// Scores one completion: distortion(latent) + noise. Pairwise
    /// flips are a group-level effect and live in `group_score`.
    pub fn reward_score(
        &self,
        latent: &LatentQuality,
        prompt_id: usize,
        tokens: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        self.validate()?;
        let g = latent.latent_score(prompt_id, tokens)?;
        Ok(self.distortion.apply(g) + self.noise_draw(rng))
    }

    /// Scores a group of completions with one shared noise sub-stream.
    /// With flip_probability > 0, each adjacent pair in latent order is
    /// independently swapped in reward order with that probability,
    /// modeling reward-model comparison errors at a controlled Kendall
    /// distance from the truth.
    pub fn group_score(
        &self,
        latent: &LatentQuality,
        prompt_id: usize,
        completions: &[Completion],
        rng: &mut ChaCha8Rng,
    ) -> Result<RewardGroup> {
        self.validate()?;
        if completions.len() < 2 {
            return Err(Error::GroupTooSmall(completions.len()));
        }
        let latent_scores: Vec<f64> = completions
            .iter()
            .map(|c| latent.latent_score(prompt_id, &c.tokens))
            .collect::<Result<_>>()?;
        let mut rewards: Vec<f64> = latent_scores
            .iter()
            .map(|&g| self.distortion.apply(g) + self.noise_draw(rng))
            .collect();

        if self.flip_probability > 0.0 {
            // Adjacent pairs in ascending latent order swap their
            // assigned rewards with the flip probability.
            let mut order: Vec<usize> = (0..completions.len()).collect();
            order.sort_by(|&a, &b| {
                latent_scores[a]
                    .partial_cmp(&latent_scores[b])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for pair in order.windows(2) {
                let u: f64 = rng.random();
                if u < self.flip_probability {
                    rewards.swap(pair[0], pair[1]);
                }
            }
        }

        RewardGroup::new(rewards, prompt_id)
    }
}
