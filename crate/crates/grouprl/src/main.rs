//! Command-line entry point: train paired arms, evaluate checkpoints,
//! run theory checks, and verify gradients.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure mid-run,
//! 4 check failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use grouprl::config::{ExperimentConfig, Overrides};
use grouprl::evalsuite;
use grouprl::policy::SequencePolicy;
use grouprl::seeding::{derive_seed, stream};
use grouprl::theorylab::{self, InflationExperiment, RewardDistribution};
use grouprl::trainer::{self, kl_budget_stop, ArmOutput, RunLog};
use grouprl::Error;

const OUT_ROOT_ENV: &str = "GROUPRL_OUT_ROOT";

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "grouprl", about = "Group-relative policy optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train paired arms and emit run logs, checkpoints, and a summary.
    Train(TrainArgs),
    /// Evaluate a finished run: matched-step win-rate table and the
    /// efficiency-crossing statistic.
    Eval(EvalArgs),
    /// Run numerical theory checks and write a JSON report.
    Theory(TheoryArgs),
    /// Verify the analytic objective gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated arm list (rank, zscore, softrank).
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    kl_budget: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.5, 0.9])]
    temperatures: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    n_seeds: usize,
}

#[derive(Args)]
struct TheoryArgs {
    /// Comma-separated subset of {lemma, inflation, scaling, kl}.
    #[arg(long, value_delimiter = ',', default_values_t = ["lemma".to_string(), "inflation".to_string(), "scaling".to_string()])]
    which: Vec<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "theory_report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    points: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Theory(args) => cmd_theory(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    };
    ExitCode::from(code)
}

fn fail(code: u8, message: &str) -> u8 {
    eprintln!("{}", serde_json::json!({ "error": message, "exit_code": code }));
    code
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::NonFiniteGradient { .. } | Error::NonFiniteLogit(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

#[derive(Serialize)]
struct ArmSummary {
    steps_completed: usize,
    final_train_reward: Option<f64>,
    final_val_reward: Option<f64>,
    final_kl: Option<f64>,
    kl_budget_stop_step: Option<usize>,
}

fn arm_summary(output: &ArmOutput, kl_budget: Option<f64>) -> ArmSummary {
    let last = output.log.records.last();
    ArmSummary {
        steps_completed: output.log.records.len(),
        final_train_reward: last.map(|r| r.mean_train_reward),
        final_val_reward: last.map(|r| r.val_reward),
        final_kl: last.map(|r| r.kl_to_reference),
        kl_budget_stop_step: kl_budget.and_then(|b| kl_budget_stop(&output.log, b)),
    }
}

fn write_arm_outputs(out_dir: &Path, outputs: &[ArmOutput]) -> std::io::Result<()> {
    for arm in outputs {
        let label = arm.kind.label();
        std::fs::write(
            out_dir.join(format!("runlog_{label}.csv")),
            arm.log.to_csv_string(),
        )?;
        for (step, policy) in &arm.checkpoints {
            std::fs::write(
                out_dir.join(format!("checkpoint_{label}_{step:06}.policy")),
                policy.to_checkpoint_string(),
            )?;
        }
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> u8 {
    let mut config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    config.apply_overrides(&Overrides {
        seed: args.seed,
        steps: args.steps,
        arms: args.arms.clone(),
        kl_budget: args.kl_budget,
        out_dir: args.out.clone(),
    });
    if let Err(e) = config.validate() {
        return fail(EXIT_CONFIG, &e.to_string());
    }
    let arms = config.arms().expect("validated");
    let env_root = std::env::var(OUT_ROOT_ENV).ok();
    let out_dir = config.resolved_out_dir(env_root.as_deref());
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        return fail(EXIT_CONFIG, &format!("cannot create {}: {e}", out_dir.display()));
    }
    if let Err(e) = std::fs::write(out_dir.join("config_resolved.toml"), config.to_toml_string()) {
        return fail(EXIT_CONFIG, &format!("cannot write resolved config: {e}"));
    }

    let spec = config.run_spec();
    let (outputs, error) = trainer::run_collect(&spec, &arms);
    // partial logs are still worth keeping on a mid-run failure
    if let Err(e) = write_arm_outputs(&out_dir, &outputs) {
        return fail(EXIT_CONFIG, &format!("cannot write outputs: {e}"));
    }
    if let Some(e) = error {
        return fail(exit_code_for(&e), &e.to_string());
    }

    let summary: BTreeMap<String, ArmSummary> = outputs
        .iter()
        .map(|arm| (arm.kind.label(), arm_summary(arm, config.train.kl_budget)))
        .collect();
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Err(e) = std::fs::write(out_dir.join("summary.json"), summary_json + "\n") {
        return fail(EXIT_CONFIG, &format!("cannot write summary: {e}"));
    }
    println!("wrote run outputs to {}", out_dir.display());
    0
}

/// Checkpoints on disk for one arm, sorted by step.
fn load_checkpoints(run_dir: &Path, label: &str) -> Result<Vec<(usize, SequencePolicy)>, Error> {
    let prefix = format!("checkpoint_{label}_");
    let mut found = Vec::new();
    for entry in std::fs::read_dir(run_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".policy")) {
            if let Ok(step) = rest.parse::<usize>() {
                found.push((step, SequencePolicy::load(&entry.path())?));
            }
        }
    }
    found.sort_by_key(|(step, _)| *step);
    Ok(found)
}

#[derive(Serialize)]
struct EvalSummary {
    arm_a: String,
    arm_b: String,
    win_rate: Option<f64>,
    ci: Option<f64>,
    crossing_step: Option<usize>,
}

fn cmd_eval(args: &EvalArgs) -> u8 {
    let config = match ExperimentConfig::load(&args.run_dir.join("config_resolved.toml")) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let arms = match config.arms() {
        Ok(a) => a,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    if arms.len() < 2 {
        return fail(EXIT_CONFIG, "eval needs a run with at least two arms");
    }
    let (label_a, label_b) = (arms[0].label(), arms[1].label());
    let ckpts_a = match load_checkpoints(&args.run_dir, &label_a) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let ckpts_b = match load_checkpoints(&args.run_dir, &label_b) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &e.to_string()),
    };
    let mut steps: Vec<usize> = ckpts_a
        .iter()
        .map(|(s, _)| *s)
        .chain(ckpts_b.iter().map(|(s, _)| *s))
        .collect();
    steps.sort_unstable();
    steps.dedup();

    let spec = config.run_spec();
    let latent = spec.latent();
    let eval_seed = derive_seed(config.seed, &[stream::EVAL]);
    let table = match evalsuite::matched_step_table(
        &ckpts_a,
        &ckpts_b,
        &steps,
        &spec.val_pool,
        &latent,
        &args.temperatures,
        args.n_seeds,
        eval_seed,
    ) {
        Ok(t) => t,
        Err(e) => return fail(exit_code_for(&e), &e.to_string()),
    };
    if let Err(e) = std::fs::write(args.run_dir.join("winrate_table.csv"), table.to_csv_string()) {
        return fail(EXIT_CONFIG, &format!("cannot write table: {e}"));
    }

    // headline cell: last matched step at the middle temperature
    let mid = args.temperatures.len() / 2;
    let headline = table
        .rows
        .iter()
        .rev()
        .find_map(|row| row.cells.get(mid).cloned().flatten());

    let crossing_step = {
        let load_log = |label: &str| -> Option<RunLog> {
            std::fs::read_to_string(args.run_dir.join(format!("runlog_{label}.csv")))
                .ok()
                .and_then(|text| RunLog::from_csv_string(&text).ok())
        };
        match (load_log(&label_a), load_log(&label_b)) {
            (Some(a), Some(b)) => evalsuite::efficiency_crossing(&a, &b),
            _ => None,
        }
    };

    let summary = EvalSummary {
        arm_a: label_a,
        arm_b: label_b,
        win_rate: headline.as_ref().map(|r| r.win_rate),
        ci: headline.as_ref().map(|r| r.ci_halfwidth),
        crossing_step,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Err(e) = std::fs::write(args.run_dir.join("eval_summary.json"), json + "\n") {
        return fail(EXIT_CONFIG, &format!("cannot write summary: {e}"));
    }
    println!("wrote winrate_table.csv and eval_summary.json to {}", args.run_dir.display());
    0
}

#[derive(Serialize)]
struct CheckEntry {
    name: String,
    expected: f64,
    observed: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct TheoryReport {
    checks: Vec<CheckEntry>,
    all_pass: bool,
}

fn lemma_checks(seed: u64) -> Vec<CheckEntry> {
    let mut max_zscore_dev: f64 = 0.0;
    let mut max_rank_dev: f64 = 0.0;
    for g in 2..=64 {
        let (zscore_msq, rank_msq) = theorylab::lemma_second_moments(g, seed);
        max_zscore_dev = max_zscore_dev.max((zscore_msq - 1.0).abs());
        max_rank_dev =
            max_rank_dev.max((rank_msq - theorylab::inflation_ratio_formula(g)).abs());
    }
    vec![
        CheckEntry {
            name: "lemma_zscore_mean_square_dev".into(),
            expected: 0.0,
            observed: max_zscore_dev,
            tolerance: 1e-12,
            pass: max_zscore_dev < 1e-12,
        },
        CheckEntry {
            name: "lemma_rank_mean_square_dev".into(),
            expected: 0.0,
            observed: max_rank_dev,
            tolerance: 1e-12,
            pass: max_rank_dev < 1e-12,
        },
    ]
}

fn inflation_checks(seed: u64) -> Vec<CheckEntry> {
    [2usize, 4, 8, 16]
        .iter()
        .map(|&g| {
            let ratio = theorylab::inflation_ratio_mc(&InflationExperiment {
                group_size: g,
                feature_dim: 8,
                feature_sigma: 1.0,
                n_trials: 100_000,
                reward_distribution: RewardDistribution::GaussianIid,
                seed,
            });
            let expected = theorylab::inflation_ratio_formula(g);
            let relative = (ratio / expected - 1.0).abs();
            CheckEntry {
                name: format!("inflation_ratio_g{g}"),
                expected,
                observed: ratio,
                tolerance: 0.05,
                pass: relative < 0.05,
            }
        })
        .collect()
}

fn scaling_checks(seed: u64) -> Vec<CheckEntry> {
    let points = theorylab::max_advantage_scaling(&[8, 64, 512, 4096], 300, seed);
    let rank_dev = points
        .iter()
        .map(|p| (p.rank_median - 2.0).abs())
        .fold(0.0f64, f64::max);
    let monotone = points
        .windows(2)
        .all(|w| w[1].zscore_median > w[0].zscore_median);
    let (_, r_squared) = theorylab::sqrt_log_fit(&points);
    vec![
        CheckEntry {
            name: "scaling_rank_median_dev".into(),
            expected: 0.0,
            observed: rank_dev,
            tolerance: 0.0,
            pass: rank_dev == 0.0,
        },
        CheckEntry {
            name: "scaling_zscore_monotone".into(),
            expected: 1.0,
            observed: if monotone { 1.0 } else { 0.0 },
            tolerance: 0.0,
            pass: monotone,
        },
        CheckEntry {
            name: "scaling_zscore_sqrtlog_r2".into(),
            expected: 0.95,
            observed: r_squared,
            tolerance: 0.95,
            pass: r_squared > 0.95,
        },
    ]
}

fn kl_checks(seed: u64) -> Result<Vec<CheckEntry>, Error> {
    // small paired runs, default desk-scale task with heavy-tailed
    // miscalibration
    let config: ExperimentConfig = toml::from_str(
        r#"
[policy]
prompts = 32
positions = 4
vocab = 8

[reward]
distortion = { shape = "cubic" }
noise_std = 1.0
noise_kind = { family = "student_t", dof = 3.0 }

[train]
steps = 40
batch_prompts = 6
group_size = 8
learning_rate = 0.15
"#,
    )
    .expect("builtin config parses");
    let mut paired = Vec::new();
    for offset in 0..5u64 {
        let mut spec = config.run_spec();
        spec.train.seed = seed.wrapping_add(offset);
        let outputs = trainer::run(
            &spec,
            &[
                grouprl::advantage::AdvantageKind::Rank,
                grouprl::advantage::AdvantageKind::ZScore,
            ],
        )?;
        let mut iter = outputs.into_iter();
        let rank = iter.next().unwrap();
        let zscore = iter.next().unwrap();
        paired.push((rank.log, zscore.log));
    }
    let report = theorylab::kl_inflation_check(&paired)?;
    Ok(vec![CheckEntry {
        name: "kl_rank_geq_zscore_fraction".into(),
        expected: 0.6,
        observed: report.fraction,
        tolerance: 0.6,
        pass: report.fraction >= 0.6,
    }])
}

fn cmd_theory(args: &TheoryArgs) -> u8 {
    let known = ["lemma", "inflation", "scaling", "kl"];
    for name in &args.which {
        if !known.contains(&name.as_str()) && !name.is_empty() {
            return fail(EXIT_CONFIG, &Error::UnknownCheck(name.clone()).to_string());
        }
    }
    let mut checks = Vec::new();
    for name in &args.which {
        let entries = match name.as_str() {
            "lemma" => lemma_checks(args.seed),
            "inflation" => inflation_checks(args.seed),
            "scaling" => scaling_checks(args.seed),
            "kl" => match kl_checks(args.seed) {
                Ok(entries) => entries,
                Err(e) => return fail(exit_code_for(&e), &e.to_string()),
            },
            _ => Vec::new(),
        };
        checks.extend(entries);
    }
    let all_pass = checks.iter().all(|c| c.pass);
    let report = TheoryReport { checks, all_pass };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(e) = std::fs::write(&args.out, json.clone() + "\n") {
        return fail(EXIT_CONFIG, &format!("cannot write report: {e}"));
    }
    println!("{json}");
    if all_pass {
        0
    } else {
        EXIT_CHECK
    }
}

fn cmd_gradcheck(args: &GradcheckArgs) -> u8 {
    match theorylab::gradient_check(args.points, args.seed) {
        Ok(report) => {
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{json}");
            if report.pass {
                0
            } else {
                EXIT_CHECK
            }
        }
        Err(e) => fail(exit_code_for(&e), &e.to_string()),
    }
}
