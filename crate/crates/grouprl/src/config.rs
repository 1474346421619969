//! Experiment configuration: a human-editable TOML schema with CLI
//! overrides. The resolved config is serialized next to the run
//! outputs so every artifact carries its exact provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::AdvantageKind;
use crate::objective::{KlMode, ObjectiveConfig};
use crate::rewardsim::{Distortion, MiscalibrationProfile, NoiseKind};
use crate::trainer::{RunSpec, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub reward: RewardSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub run: RunSection,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub prompts: usize,
    pub positions: usize,
    pub vocab: usize,
    pub init_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        // desk-scale default shape: big enough for ordering structure,
        // small enough for sub-minute runs
        Self {
            prompts: 64,
            positions: 6,
            vocab: 16,
            init_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub distortion: Distortion,
    pub noise_std: f64,
    pub noise_kind: NoiseKind,
    pub flip_probability: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            distortion: Distortion::Identity,
            noise_std: 0.0,
            noise_kind: NoiseKind::Gaussian,
            flip_probability: 0.0,
        }
    }
}

impl RewardSection {
    pub fn profile(&self) -> MiscalibrationProfile {
        MiscalibrationProfile {
            distortion: self.distortion.clone(),
            noise_std: self.noise_std,
            noise_kind: self.noise_kind,
            flip_probability: self.flip_probability,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_prompts: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub inner_updates: usize,
    pub sampling_temperature: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub kl_mode: KlMode,
    pub kl_budget: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_prompts: 8,
            group_size: 8,
            learning_rate: 0.1,
            warmup_steps: 10,
            inner_updates: 1,
            sampling_temperature: 1.0,
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            kl_mode: KlMode::Exact,
            kl_budget: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub arms: Vec<String>,
    pub validation_fraction: f64,
    pub checkpoint_every: usize,
    pub soft_rank_temperature: f64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            arms: vec!["rank".into(), "zscore".into()],
            validation_fraction: 0.25,
            checkpoint_every: 25,
            soft_rank_temperature: 1.0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// CLI-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub arms: Option<Vec<String>>,
    pub kl_budget: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("cannot parse {}: {e}", path.display())))
    }

    pub fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(steps) = overrides.steps {
            self.train.steps = steps;
        }
        if let Some(arms) = &overrides.arms {
            self.run.arms = arms.clone();
        }
        if let Some(budget) = overrides.kl_budget {
            self.train.kl_budget = Some(budget);
        }
        if let Some(out) = &overrides.out_dir {
            self.run.out_dir = out.clone();
        }
    }

    pub fn parse_arm(&self, name: &str) -> Result<AdvantageKind> {
        match name {
            "rank" => Ok(AdvantageKind::Rank),
            "zscore" => Ok(AdvantageKind::ZScore),
            "softrank" => Ok(AdvantageKind::SoftRank(self.run.soft_rank_temperature)),
            other => Err(Error::InvalidConfig(format!(
                "unknown arm '{other}' (expected rank, zscore, or softrank)"
            ))),
        }
    }

    pub fn arms(&self) -> Result<Vec<AdvantageKind>> {
        self.run.arms.iter().map(|a| self.parse_arm(a)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy.prompts == 0 || self.policy.positions == 0 || self.policy.vocab == 0 {
            return Err(Error::InvalidConfig("policy shape must be positive".into()));
        }
        if !(self.run.validation_fraction > 0.0 && self.run.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.run.validation_fraction
            )));
        }
        if self.run.arms.is_empty() {
            return Err(Error::InvalidConfig("at least one arm required".into()));
        }
        self.arms()?;
        self.reward.profile().validate()?;
        self.train_config().validate()?;
        let (train_pool, val_pool) = self.prompt_pools();
        if train_pool.is_empty() || val_pool.is_empty() {
            return Err(Error::InvalidConfig(
                "prompt split leaves an empty pool; adjust prompts or validation_fraction".into(),
            ));
        }
        Ok(())
    }

    /// Training prompts first, validation prompts last.
    pub fn prompt_pools(&self) -> (Vec<usize>, Vec<usize>) {
        let total = self.policy.prompts;
        let val_count = ((total as f64 * self.run.validation_fraction).round() as usize)
            .clamp(1, total.saturating_sub(1));
        let train_count = total - val_count;
        ((0..train_count).collect(), (train_count..total).collect())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_prompts: self.train.batch_prompts,
            group_size: self.train.group_size,
            learning_rate: self.train.learning_rate,
            warmup_steps: self.train.warmup_steps,
            inner_updates: self.train.inner_updates,
            // placeholder; the runner swaps the kind in per arm
            advantage_kind: AdvantageKind::Rank,
            objective: ObjectiveConfig {
                clip_epsilon: self.train.clip_epsilon,
                kl_beta: self.train.kl_beta,
                kl_mode: self.train.kl_mode,
            },
            sampling_temperature: self.train.sampling_temperature,
            kl_budget: self.train.kl_budget,
            seed: self.seed,
        }
    }

    pub fn run_spec(&self) -> RunSpec {
        let (train_pool, val_pool) = self.prompt_pools();
        RunSpec {
            train: self.train_config(),
            profile: self.reward.profile(),
            prompts: self.policy.prompts,
            positions: self.policy.positions,
            vocab: self.policy.vocab,
            init_scale: self.policy.init_scale,
            train_pool,
            val_pool,
            checkpoint_every: self.run.checkpoint_every,
        }
    }

    /// Output directory after applying the environment root override.
    pub fn resolved_out_dir(&self, env_root: Option<&str>) -> PathBuf {
        match env_root {
            Some(root) if !root.is_empty() => Path::new(root).join(&self.run.out_dir),
            _ => self.run.out_dir.clone(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
