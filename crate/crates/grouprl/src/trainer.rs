//! Iterative online optimization loop: snapshot, sample, score,
//! transform, ascend, log. Paired arms share the initial policy,
//! reference, prompt pool, reward profile, and every per-step sampling
//! sub-stream, so two arms differ only in their advantage transform.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageKind, RewardGroup};
use crate::evalsuite;
use crate::objective::{self, ObjectiveConfig, StepBatch};
use crate::policy::SequencePolicy;
use crate::rewardsim::{LatentQuality, MiscalibrationProfile};
use crate::seeding::{derive_seed, stream, substream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Prompts per step (B).
    pub batch_prompts: usize,
    /// Completions per prompt (G).
    pub group_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Inner gradient-ascent updates per sampled batch (mu).
    pub inner_updates: usize,
    pub advantage_kind: AdvantageKind,
    pub objective: ObjectiveConfig,
    pub sampling_temperature: f64,
    pub kl_budget: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_prompts < 1 {
            return Err(Error::InvalidConfig("batch_prompts must be >= 1".into()));
        }
        if self.group_size < 2 {
            return Err(Error::InvalidConfig("group_size must be >= 2".into()));
        }
        if self.inner_updates < 1 {
            return Err(Error::InvalidConfig("inner_updates must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.sampling_temperature > 0.0) {
            return Err(Error::NonPositiveSamplingTemperature(self.sampling_temperature));
        }
        if let Some(budget) = self.kl_budget {
            if !(budget >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "kl_budget must be non-negative, got {budget}"
                )));
            }
        }
        self.objective.validate()
    }

    /// Linear warmup: lr * step / warmup_steps for the first
    /// warmup_steps steps, lr afterwards. `step` is 1-based.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Per-step training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_train_reward: f64,
    pub val_reward: f64,
    pub kl_to_reference: f64,
    pub gradient_norm: f64,
    pub advantage_mean_square: f64,
    pub stopped_at_budget: bool,
    /// Prompt ids sampled this step, logged so paired arms can assert
    /// they saw the same prompts.
    pub prompt_ids: Vec<usize>,
}

/// One arm's full metric trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

pub const RUNLOG_CSV_HEADER: &str = "# grouprl-runlog v1\nstep,train_reward,val_reward,kl,grad_norm,adv_msq";

impl RunLog {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(RUNLOG_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?}\n",
                r.step,
                r.mean_train_reward,
                r.val_reward,
                r.kl_to_reference,
                r.gradient_norm,
                r.advantage_mean_square
            ));
        }
        out
    }

    pub fn from_csv_string(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.starts_with("step,") || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::CheckpointFormat(format!("bad runlog row: {line}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::CheckpointFormat(format!("bad runlog value: {s}")))
            };
            records.push(StepRecord {
                step: fields[0]
                    .parse()
                    .map_err(|_| Error::CheckpointFormat(format!("bad step: {}", fields[0])))?,
                mean_train_reward: parse(fields[1])?,
                val_reward: parse(fields[2])?,
                kl_to_reference: parse(fields[3])?,
                gradient_norm: parse(fields[4])?,
                advantage_mean_square: parse(fields[5])?,
                stopped_at_budget: false,
                prompt_ids: Vec::new(),
            });
        }
        Ok(Self { records })
    }
}

/// Smallest recorded step whose KL to the reference reaches the budget.
/// Steps are indexed from 1 (after the first update).
pub fn kl_budget_stop(log: &RunLog, kl_star: f64) -> Option<usize> {
    log.records
        .iter()
        .find(|r| r.kl_to_reference >= kl_star)
        .map(|r| r.step)
}

fn sample_prompts_without_replacement(
    pool: &[usize],
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    shuffled.truncate(count);
    shuffled
}

/// One training step: snapshot the policy, sample a batch from the
/// snapshot, score, transform, then perform mu ascent updates. Returns
/// the metrics record and the raw reward groups (pre-transform), which
/// paired runs use to assert arm isolation.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    theta: &mut SequencePolicy,
    reference: &SequencePolicy,
    config: &TrainConfig,
    profile: &MiscalibrationProfile,
    latent: &LatentQuality,
    train_pool: &[usize],
    val_pool: &[usize],
    step_index: usize,
) -> Result<(StepRecord, Vec<RewardGroup>)> {
    config.validate()?;
    profile.validate()?;
    if train_pool.is_empty() {
        return Err(Error::EmptyPromptPool);
    }
    if config.batch_prompts > train_pool.len() {
        return Err(Error::InvalidConfig(format!(
            "batch_prompts {} exceeds training pool size {}",
            config.batch_prompts,
            train_pool.len()
        )));
    }
    let seed = config.seed;
    let step_tag = step_index as u64;

    let snapshot_old = theta.clone();
    let prompt_ids = sample_prompts_without_replacement(
        train_pool,
        config.batch_prompts,
        &mut substream(seed, &[stream::PROMPT_DRAW, step_tag]),
    );

    let mut completions = Vec::with_capacity(prompt_ids.len());
    let mut groups = Vec::with_capacity(prompt_ids.len());
    let mut advantages = Vec::with_capacity(prompt_ids.len());
    for (b, &prompt) in prompt_ids.iter().enumerate() {
        let comps = snapshot_old.sample_completions(
            prompt,
            config.group_size,
            config.sampling_temperature,
            &mut substream(seed, &[stream::COMPLETIONS, step_tag, b as u64]),
        )?;
        let group = profile.group_score(
            latent,
            prompt,
            &comps,
            &mut substream(seed, &[stream::REWARD_NOISE, step_tag, b as u64]),
        )?;
        advantages.push(config.advantage_kind.transform(&group)?);
        groups.push(group);
        completions.push(comps);
    }

    let batch = StepBatch {
        prompt_ids: prompt_ids.clone(),
        completions,
        advantages,
        snapshot_old: &snapshot_old,
        reference,
    };

    let lr = config.learning_rate_at(step_index);
    let mut gradient_norm = 0.0;
    for _ in 0..config.inner_updates {
        let grad = objective::objective_gradient(theta, &batch, &config.objective)?;
        gradient_norm = objective::l2_norm(&grad);
        if !gradient_norm.is_finite() {
            return Err(Error::NonFiniteGradient {
                step: step_index,
                norm: gradient_norm,
            });
        }
        theta.ascend(&grad, lr);
    }

    let mean_train_reward = groups
        .iter()
        .map(|g| g.rewards.iter().sum::<f64>() / g.rewards.len() as f64)
        .sum::<f64>()
        / groups.len() as f64;
    let advantage_mean_square = batch
        .advantages
        .iter()
        .map(|a| a.mean_square())
        .sum::<f64>()
        / batch.advantages.len() as f64;
    let kl_to_reference = theta.mean_exact_kl(reference)?;
    let val_reward = evalsuite::validation_reward(
        theta,
        val_pool,
        train_pool,
        profile,
        latent,
        config.group_size,
        config.sampling_temperature,
        derive_seed(seed, &[stream::VALIDATION, step_tag]),
    )?;

    let stopped_at_budget = config
        .kl_budget
        .is_some_and(|budget| kl_to_reference >= budget);

    Ok((
        StepRecord {
            step: step_index,
            mean_train_reward,
            val_reward,
            kl_to_reference,
            gradient_norm,
            advantage_mean_square,
            stopped_at_budget,
            prompt_ids,
        },
        groups,
    ))
}

/// Full experiment specification for a (possibly multi-arm) run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub profile: MiscalibrationProfile,
    pub prompts: usize,
    pub positions: usize,
    pub vocab: usize,
    pub init_scale: f64,
    pub train_pool: Vec<usize>,
    pub val_pool: Vec<usize>,
    pub checkpoint_every: usize,
}

impl RunSpec {
    /// The latent quality table shared by every arm of this run.
    pub fn latent(&self) -> LatentQuality {
        LatentQuality::random(
            self.prompts,
            self.positions,
            self.vocab,
            &mut substream(self.train.seed, &[stream::LATENT_TABLE]),
        )
    }

    /// The shared initial policy (also the KL reference).
    pub fn initial_policy(&self) -> SequencePolicy {
        SequencePolicy::random_init(
            self.prompts,
            self.positions,
            self.vocab,
            self.init_scale,
            &mut substream(self.train.seed, &[stream::INIT_POLICY]),
        )
    }
}

/// One arm's results.
#[derive(Debug, Clone)]
pub struct ArmOutput {
    pub kind: AdvantageKind,
    pub final_policy: SequencePolicy,
    pub log: RunLog,
    pub checkpoints: Vec<(usize, SequencePolicy)>,
}

/// Trains every arm under identical seeds, differing only in the
/// advantage transform. Asserts the pairing contract: identical prompt
/// ids per step and identical step-1 reward groups across arms.
pub fn run(spec: &RunSpec, arms: &[AdvantageKind]) -> Result<Vec<ArmOutput>> {
    let (outputs, error) = run_collect(spec, arms);
    match error {
        Some(e) => Err(e),
        None => Ok(outputs),
    }
}

/// Like `run`, but on a mid-run failure returns the arms and partial
/// logs completed so far alongside the error, so callers can persist
/// them.
pub fn run_collect(spec: &RunSpec, arms: &[AdvantageKind]) -> (Vec<ArmOutput>, Option<Error>) {
    match run_inner(spec, arms) {
        Ok(outputs) => (outputs, None),
        Err((outputs, e)) => (outputs, Some(e)),
    }
}

type PartialFailure = (Vec<ArmOutput>, Error);

fn run_inner(spec: &RunSpec, arms: &[AdvantageKind]) -> std::result::Result<Vec<ArmOutput>, PartialFailure> {
    if let Err(e) = spec.train.validate() {
        return Err((Vec::new(), e));
    }
    let latent = spec.latent();
    let init = spec.initial_policy();
    let reference = init.clone();

    let mut outputs = Vec::with_capacity(arms.len());
    let mut first_step_groups: Option<Vec<RewardGroup>> = None;
    for &kind in arms {
        let mut config = spec.train.clone();
        config.advantage_kind = kind;
        let mut theta = init.clone();
        let mut log = RunLog::default();
        let mut checkpoints = Vec::new();
        for step in 1..=config.steps {
            let step_result = train_step(
                &mut theta,
                &reference,
                &config,
                &spec.profile,
                &latent,
                &spec.train_pool,
                &spec.val_pool,
                step,
            );
            let (record, groups) = match step_result {
                Ok(pair) => pair,
                Err(e) => {
                    outputs.push(ArmOutput {
                        kind,
                        final_policy: theta,
                        log,
                        checkpoints,
                    });
                    return Err((outputs, e));
                }
            };
            if step == 1 {
                match &first_step_groups {
                    None => first_step_groups = Some(groups),
                    Some(expected) => {
                        if *expected != groups {
                            outputs.push(ArmOutput {
                                kind,
                                final_policy: theta,
                                log,
                                checkpoints,
                            });
                            return Err((
                                outputs,
                                Error::UnpairedLogs(
                                    "step-1 reward groups differ across arms".into(),
                                ),
                            ));
                        }
                    }
                }
            }
            let stop = record.stopped_at_budget;
            if spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0 {
                checkpoints.push((step, theta.clone()));
            }
            log.records.push(record);
            if stop {
                break;
            }
        }
        outputs.push(ArmOutput {
            kind,
            final_policy: theta,
            log,
            checkpoints,
        });
    }

    // Pairing contract: every arm must have sampled the same prompts
    // at matched steps.
    let mut mismatch = None;
    if let Some((first, rest)) = outputs.split_first() {
        for other in rest {
            for (a, b) in first.log.records.iter().zip(&other.log.records) {
                if a.prompt_ids != b.prompt_ids {
                    mismatch = Some(a.step);
                }
            }
        }
    }
    if let Some(step) = mismatch {
        return Err((
            outputs,
            Error::UnpairedLogs(format!("prompt ids differ at step {step}")),
        ));
    }
    Ok(outputs)
}
