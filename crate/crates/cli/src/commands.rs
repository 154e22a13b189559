//! One function per subcommand. Each reads a resolved config, runs the owning
//! library module and writes its artifacts through a [`RunDir`].

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tokenflip_core::batching::{evaluate, run_training, write_metrics_csv, MetricsRow, PlanMode, TrainConfig};
use tokenflip_core::cancellation::{group_gradient_stats, idealized_cross_term, polarity_comparison, GroupGradientStats};
use tokenflip_core::checkpoint::{encode, load_checkpoint_for};
use tokenflip_core::coupling::{
    phi_sparsity, run_masking_probe, strength_quantile_boost_rates, summarize_masking, write_masking_csv,
    BatchTraces, MaskingResult,
};
use tokenflip_core::displacement::{flip_report, measure_displacement, write_records_csv};
use tokenflip_core::grpo::{grpo_gradient, sample_batch, Clip, Decoding, RolloutBatch, SamplingConfig};
use tokenflip_core::policy::Policy;
use tokenflip_core::pretrain::{greedy_accuracy, warm_start};
use tokenflip_core::report::{fmt_f64, fmt_opt, write_csv};
use tokenflip_core::rng::Rng;
use tokenflip_core::stats::{mean, sign_test_greater, std_pop, SignTest};
use tokenflip_core::task::{TaskInstance, TaskSuite};
use tokenflip_core::value::{
    analytic_calibration, budget_scaling_run, repeated_update_gap, value_gap_experiment, write_bucket_csv,
    AnalyticEnv,
};
use tokenflip_core::Error;

use crate::config::{PolicySource, ProbeBatch, Resolved, ValueMode, Variant};
use crate::error::{CliError, CliResult, Context};
use crate::rundir::RunDir;

/// Samples used for the sampled-reward evaluation of a policy.
const EVAL_SAMPLES: usize = 8;

struct Lab<'a> {
    run: &'a Resolved,
    rng: Rng,
    suite: TaskSuite,
}

impl<'a> Lab<'a> {
    fn new(run: &'a Resolved, dir: &mut RunDir) -> CliResult<Self> {
        let rng = Rng::new(run.seed);
        let suite = TaskSuite::generate(&run.config.suite, &mut rng.split("suite")).context("generating suite")?;
        dir.write_with("suite.jsonl", |w| suite.write_jsonl(w))?;
        Ok(Self { run, rng, suite })
    }

    fn policy(&self) -> CliResult<Policy> {
        let c = &self.run.config;
        match (c.policy.source, &c.policy.checkpoint) {
            (PolicySource::Warm, _) => {
                warm_start(c.model, &c.policy.warm_start, &self.rng.split("warm_start")).context("warm start")
            }
            (PolicySource::Fresh, _) => Policy::init(c.model, &mut self.rng.split("init")).context("policy init"),
            (PolicySource::Checkpoint, Some(path)) => {
                load_checkpoint_for(path, &c.model).context(&format!("loading {}", path.display()))
            }
            (PolicySource::Checkpoint, None) => Err(CliError::Config("missing field `policy.checkpoint`".into())),
        }
    }

    /// Draws the probe batch. With `need_mixed`, redraws until some group has
    /// both rewards, up to `batch.max_attempts` draws.
    fn batch(&self, policy: &Policy, need_mixed: bool) -> CliResult<(RolloutBatch, usize)> {
        let b: &ProbeBatch = &self.run.config.batch;
        let sampling = SamplingConfig {
            group_size: b.group_size,
            decoding: Decoding::Sample {
                temperature: b.temperature,
            },
            max_len: b.max_len,
        };
        for attempt in 0..b.max_attempts {
            let rng = self.rng.split("batch").split_index(attempt as u64);
            let ids = rng.split("tasks").sample_indices(self.suite.len(), b.n_tasks);
            let tasks: Vec<TaskInstance> = ids.iter().map(|&i| self.suite.tasks[i].clone()).collect();
            let batch = sample_batch(policy, &tasks, &ids, &sampling, &rng.split("rollouts")).context("sampling batch")?;
            if !need_mixed || batch.has_mixed_group() {
                return Ok((batch, attempt + 1));
            }
        }
        Err(CliError::Runtime {
            context: format!("no mixed-sign batch in {} draws", b.max_attempts),
            source: Error::NoMixedGroup,
        })
    }
}

fn sign_json(t: &SignTest) -> serde_json::Value {
    json!({ "positive": t.positive, "negative": t.negative, "p_value": t.p_value })
}

pub fn warm_start_cmd(run: &Resolved, dir: &mut RunDir) -> CliResult<()> {
    let lab = Lab::new(run, dir)?;
    let policy = lab.policy()?;
    let max_len = run.config.batch.max_len;
    let greedy = greedy_accuracy(&policy, &lab.suite, max_len).context("evaluating")?;
    let sampled = evaluate(&policy, &lab.suite, max_len, EVAL_SAMPLES, &lab.rng.split("eval")).context("evaluating")?;
    dir.write_bytes("policy.ckpt", &encode(&policy))?;
    dir.write_json(
        "summary.json",
        &json!({
            "source": run.config.policy.source,
            "param_count": policy.param_count(),
            "greedy_accuracy": greedy,
            "sampled_reward": sampled,
        }),
    )
}

pub fn train_cmd(run: &Resolved, dir: &mut RunDir) -> CliResult<()> {
    let lab = Lab::new(run, dir)?;
    let policy = lab.policy()?;
    let cfg = &run.config.train;
    let (trained, rows) = run_training(&policy, &lab.suite, cfg, &lab.rng.split("train")).context("training")?;
    dir.write_with("metrics.csv", |w| write_metrics_csv(w, &rows))?;
    dir.write_bytes("policy.ckpt", &encode(&trained))?;
    let last = rows.last().expect("training logs the initial row");
    dir.write_json(
        "summary.json",
        &json!({
            "steps": cfg.steps,
            "plan_mode": cfg.plan_mode,
            "rb_tau": cfg.rb_tau,
            "initial_eval_reward": rows[0].eval_reward,
            "final_eval_reward": last.eval_reward,
            "emitted_batches": last.emitted_batches,
            "evicted_count": last.evicted_count,
        }),
    )
}

pub fn probe_flip(run: &Resolved, dir: &mut RunDir) -> CliResult<()> {
    let lab = Lab::new(run, dir)?;
    let policy = lab.policy()?;
    let (batch, attempts) = lab.batch(&policy, false)?;
    let p = &run.config.flip;
    let clip = if p.clip { Clip::standard() } else { Clip::Off };
    let grad = grpo_gradient(&policy, &batch, p.polarity, clip).context("probe-flip gradient")?;
    let after = policy.apply_delta(&grad, p.eta).context("probe-flip update")?;
    let records = measure_displacement(&policy, &after, &batch, p.eps).context("probe-flip measurement")?;
    let report = flip_report(&records).context("probe-flip report")?;
    dir.write_with("batch.jsonl", |w| batch.write_jsonl(w))?;
    dir.write_with("records.csv", |w| write_records_csv(w, &records))?;
    dir.write_with("flip_report.csv", |w| report.write_csv(w))?;
    dir.write_json(
        "summary.json",
        &json!({
            "update_polarity": p.polarity,
            "eta": p.eta,
            "eps": p.eps,
            "batch_draws": attempts,
            "tokens": records.len(),
            "report": report,
        }),
    )
}

pub fn probe_coupling(run: &Resolved, dir: &mut RunDir) -> CliResult<()> {
    let lab = Lab::new(run, dir)?;
    let policy = lab.policy()?;
    let (batch, attempts) = lab.batch(&policy, true)?;
    let p = &run.config.coupling;
    let traces = BatchTraces::new(&policy, &batch).context("probe-coupling traces")?;
    let sparsity = phi_sparsity(&traces).context("probe-coupling sparsity")?;
    let results = run_masking_probe(&policy, &batch, &p.masking, &lab.rng.split("masking")).context("probe-coupling masking")?;
    let summaries = summarize_masking(&results);
    let quantiles: Vec<_> = summaries
        .iter()
        .map(|s| {
            let subset: Vec<MaskingResult> = results
                .iter()
                .filter(|r| r.rule == s.rule && r.paradigm == s.paradigm)
                .cloned()
                .collect();
            json!({
                "rule": s.rule,
                "paradigm": s.paradigm,
                "buckets": strength_quantile_boost_rates(&subset, p.quantile_buckets),
            })
        })
        .collect();
    dir.write_with("batch.jsonl", |w| batch.write_jsonl(w))?;
    dir.write_with("masking.csv", |w| write_masking_csv(w, &results))?;
    dir.write_with("masking_summary.csv", |w| {
        write_csv(
            w,
            &["rule", "paradigm", "n", "boost_rate", "mean_boost"],
            summaries.iter().map(|s| {
                vec![
                    s.rule.as_str().to_string(),
                    s.paradigm.as_str().to_string(),
                    s.n.to_string(),
                    fmt_f64(s.boost_rate),
                    fmt_f64(s.mean_boost),
                ]
            }),
        )
    })?;
    dir.write_json(
        "summary.json",
        &json!({
            "batch_draws": attempts,
            "tokens": traces.len(),
            "phi_sparsity": sparsity,
            "summaries": summaries,
            "strength_quantiles": quantiles,
        }),
    )
}

#[derive(Serialize)]
struct GroupRow<'a> {
    #[serde(flatten)]
    stats: &'a GroupGradientStats,
    idealized_cross_term: Option<f64>,
}

pub fn probe_cancel(run: &Resolved, dir: &mut RunDir) -> CliResult<()> {
    let lab = Lab::new(run, dir)?;
    let policy = lab.policy()?;
    let (batch, attempts) = lab.batch(&policy, true)?;
    let p = &run.config.cancel;
    let stats = batch
        .groups
        .iter()
        .filter(|g| g.is_mixed())
        .map(|g| group_gradient_stats(&policy, g))
        .collect::<tokenflip_core::Result<Vec<_>>>()
        .context("probe-cancel group statistics")?;
    let idealized: Vec<Option<f64>> = stats
        .iter()
        .map(|s| idealized_cross_term(&s.advantages, s.mean_overlap).ok())
        .collect();
    let cmp = polarity_comparison(&policy, &batch, p.eta, p.eps).context("probe-cancel polarity comparison")?;
    dir.write_with("batch.jsonl", |w| batch.write_jsonl(w))?;
    dir.write_with("groups.csv", |w| {
        write_csv(
            w,
            &[
                "query_id",
                "group_size",
                "self_term",
                "cross_term",
                "total",
                "mean_overlap",
                "overlap_std",
                "cross_negative",
                "idealized_cross_term",
            ],
            stats.iter().zip(&idealized).map(|(s, ideal)| {
                vec![
                    s.query_id.to_string(),
                    s.advantages.len().to_string(),
                    fmt_f64(s.self_term),
                    fmt_f64(s.cross_term),
                    fmt_f64(s.total),
                    fmt_f64(s.mean_overlap),
                    fmt_f64(s.overlap_std),
                    s.cross_negative.to_string(),
                    fmt_opt(*ideal),
                ]
            }),
        )
    })?;
    dir.write_with("category_boost.csv", |w| cmp.report.write_csv(w))?;
    for (name, records) in [
        ("positive_only", &cmp.positive_only),
        ("joint", &cmp.joint),
        ("negative_only", &cmp.negative_only),
    ] {
        dir.write_with(&format!("records_{name}.csv"), |w| write_records_csv(w, records))?;
    }
    let negative = stats.iter().filter(|s| s.cross_negative).count();
    let groups: Vec<GroupRow> = stats
        .iter()
        .zip(&idealized)
        .map(|(stats, &idealized_cross_term)| GroupRow {
            stats,
            idealized_cross_term,
        })
        .collect();
    dir.write_json(
        "summary.json",
        &json!({
            "batch_draws": attempts,
            "eta": p.eta,
            "eps": p.eps,
            "mixed_groups": stats.len(),
            "cross_negative_fraction": negative as f64 / stats.len() as f64,
            "groups": groups,
            "category_boost": cmp.report,
        }),
    )
}

pub fn probe_value(run: &Resolved, dir: &mut RunDir) -> CliResult<()> {
    let lab = Lab::new(run, dir)?;
    let v = &run.config.value;
    match v.mode {
        ValueMode::Calibration => {
            let c = &v.calibration;
            let env = AnalyticEnv::new(c.p_correct, 0, c.vocab).context("probe-value calibration")?;
            let rows = analytic_calibration(&env, c.trials, c.m, &lab.rng.split("calibration"))
                .context("probe-value calibration")?;
            let estimates: Vec<f64> = rows.iter().map(|r| r.delta_hat).collect();
            let expected = env.expected_value(env.correct);
            let mean_hat = mean(&estimates).expect("trials >= 1");
            let se_of_mean = std_pop(&estimates).expect("trials >= 1") / (rows.len() as f64).sqrt();
            let covered = rows.iter().filter(|r| r.within_3se).count() as f64 / rows.len() as f64;
            dir.write_with("calibration.csv", |w| {
                write_csv(
                    w,
                    &["trial", "delta_hat", "expected", "combined_se", "within_3se"],
                    rows.iter().map(|r| {
                        vec![
                            r.trial.to_string(),
                            fmt_f64(r.delta_hat),
                            fmt_f64(r.expected),
                            fmt_f64(r.combined_se),
                            r.within_3se.to_string(),
                        ]
                    }),
                )
            })?;
            dir.write_with("comparison.csv", |w| {
                write_csv(
                    w,
                    &["p_correct", "m", "trials", "closed_form", "mean_estimate", "abs_error", "se_of_mean", "coverage_3se"],
                    [vec![
                        fmt_f64(c.p_correct),
                        c.m.to_string(),
                        c.trials.to_string(),
                        fmt_f64(expected),
                        fmt_f64(mean_hat),
                        fmt_f64((mean_hat - expected).abs()),
                        fmt_f64(se_of_mean),
                        fmt_f64(covered),
                    ]],
                )
            })?;
            dir.write_json(
                "summary.json",
                &json!({
                    "mode": v.mode,
                    "closed_form": expected,
                    "mean_estimate": mean_hat,
                    "se_of_mean": se_of_mean,
                    "coverage_3se": covered,
                }),
            )
        }
        ValueMode::Gap => {
            let policy = lab.policy()?;
            let (batch, attempts) = lab.batch(&policy, true)?;
            let gap = value_gap_experiment(&policy, &batch, &v.estimator, &lab.rng.split("value")).context("probe-value gap")?;
            let test = sign_test_greater(&gap.paired_differences());
            dir.write_with("batch.jsonl", |w| batch.write_jsonl(w))?;
            dir.write_with("estimates.csv", |w| gap.write_estimates_csv(w))?;
            dir.write_with("buckets.csv", |w| write_bucket_csv(w, &gap.report.buckets))?;
            dir.write_json(
                "summary.json",
                &json!({
                    "mode": v.mode,
                    "batch_draws": attempts,
                    "per_class": gap.cohort.per_class,
                    "report": gap.report,
                    "paired_sign_test": sign_json(&test),
                }),
            )
        }
        ValueMode::Budget => {
            let policy = lab.policy()?;
            let grid: Vec<(usize, usize)> = v.budget_grid.iter().map(|c| (c[0], c[1])).collect();
            let rows = budget_scaling_run(&policy, &lab.suite, &grid, &v.estimator, &lab.rng.split("budget"))
                .context("probe-value budget")?;
            dir.write_with("budget.csv", |w| {
                write_csv(
                    w,
                    &["batch_size", "group_size", "mixed_groups", "n_positive", "n_negative", "gap", "top25_gap"],
                    rows.iter().map(|r| {
                        vec![
                            r.batch_size.to_string(),
                            r.group_size.to_string(),
                            r.mixed_groups.to_string(),
                            r.per_class[0].to_string(),
                            r.per_class[1].to_string(),
                            fmt_opt(r.gap),
                            fmt_opt(r.top25_gap),
                        ]
                    }),
                )
            })?;
            dir.write_json("summary.json", &json!({ "mode": v.mode, "rows": rows }))
        }
        ValueMode::Repeat => {
            let policy = lab.policy()?;
            let (batch, attempts) = lab.batch(&policy, true)?;
            let rows = repeated_update_gap(&policy, &batch, v.repeat_steps, &v.estimator, &lab.rng.split("repeat"))
                .context("probe-value repeat")?;
            dir.write_with("batch.jsonl", |w| batch.write_jsonl(w))?;
            dir.write_with("repeat.csv", |w| {
                write_csv(
                    w,
                    &["step", "n_positive", "n_negative", "gap"],
                    rows.iter().map(|r| {
                        vec![
                            r.step.to_string(),
                            r.per_class[0].to_string(),
                            r.per_class[1].to_string(),
                            fmt_opt(r.gap),
                        ]
                    }),
                )
            })?;
            dir.write_json(
                "summary.json",
                &json!({ "mode": v.mode, "batch_draws": attempts, "rows": rows }),
            )
        }
    }
}

fn variant_config(base: &TrainConfig, variant: Variant, tau: f64) -> TrainConfig {
    let (plan_mode, rb_tau) = match variant {
        Variant::Random => (PlanMode::Random, None),
        Variant::SignPartition => (PlanMode::SignPartition, None),
        Variant::QueryPreserved => (PlanMode::QueryPreserved, None),
        Variant::RewardBalanced => (PlanMode::Random, Some(tau)),
        Variant::QueryPreservedRewardBalanced => (PlanMode::QueryPreserved, Some(tau)),
    };
    TrainConfig {
        plan_mode,
        rb_tau,
        ..base.clone()
    }
}

pub fn ablate_batching(run: &Resolved, dir: &mut RunDir) -> CliResult<()> {
    let lab = Lab::new(run, dir)?;
    let policy = lab.policy()?;
    let a = &run.config.ablate;
    let jobs: Vec<(Variant, usize)> = a
        .variants
        .iter()
        .flat_map(|&v| (0..a.seeds).map(move |s| (v, s)))
        .collect();
    let runs: Vec<Vec<MetricsRow>> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = variant_config(&run.config.train, variant, a.tau);
            let rng = lab.rng.split("ablate").split_index(seed as u64);
            run_training(&policy, &lab.suite, &cfg, &rng)
                .map(|(_, rows)| rows)
                .context(&format!("ablate-batching {} seed {seed}", variant.as_str()))
        })
        .collect::<CliResult<_>>()?;
    let finals: Vec<f64> = runs
        .iter()
        .map(|rows| rows.last().and_then(|r| r.eval_reward).expect("final step is evaluated"))
        .collect();
    for ((variant, seed), rows) in jobs.iter().zip(&runs) {
        let name = format!("runs/{}_seed{seed}.csv", variant.as_str().replace('+', "_"));
        dir.write_with(&name, |w| write_metrics_csv(w, rows))?;
    }
    dir.write_with("ablation.csv", |w| {
        write_csv(
            w,
            &["variant", "seed", "final_eval_reward"],
            jobs.iter()
                .zip(&finals)
                .map(|((v, s), f)| vec![v.as_str().to_string(), s.to_string(), fmt_f64(*f)]),
        )
    })?;
    let summary: Vec<serde_json::Value> = a
        .variants
        .iter()
        .map(|&v| {
            let vals: Vec<f64> = jobs
                .iter()
                .zip(&finals)
                .filter(|((jv, _), _)| *jv == v)
                .map(|(_, &f)| f)
                .collect();
            json!({
                "variant": v.as_str(),
                "seeds": vals.len(),
                "mean_final_eval_reward": mean(&vals),
                "std_final_eval_reward": std_pop(&vals),
            })
        })
        .collect();
    dir.write_json(
        "summary.json",
        &json!({
            "steps": run.config.train.steps,
            "tau": a.tau,
            "minibatches": run.config.train.minibatches,
            "variants": summary,
        }),
    )
}
