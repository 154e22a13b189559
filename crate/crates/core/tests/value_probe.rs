mod common;

use common::*;
use tokenflip_core::rng::Rng;
use tokenflip_core::task::{verify, TaskSuite};
use tokenflip_core::value::*;

fn small_config() -> ValueConfig {
    ValueConfig {
        n_per_class: 4,
        m: 32,
        ..ValueConfig::default()
    }
}

#[test]
fn policy_estimates_satisfy_the_estimator_identity() {
    let policy = warm();
    let task = &suite().tasks[0];
    let env = PolicyEnv::new(policy, task, 6);
    let prefix = [tokenflip_core::task::ANS];
    let digit = task.canonical_response()[1];
    let e = mc_token_value(&env, &prefix, digit, 64, DEFAULT_P_GUARD, &Rng::new(2)).unwrap();
    assert!(estimator_identity_error(&e) < 1e-12);
    assert!((0.0..=1.0).contains(&e.avg_forced) && (0.0..=1.0).contains(&e.avg_free));
    // forcing the correct digit after ANS succeeds unless the policy misses EOS
    assert!(e.avg_forced >= e.avg_free);
    let ctx: Vec<usize> = task.prompt().into_iter().chain(prefix).collect();
    let p = policy.trace_position(&ctx, digit).unwrap().logp.exp();
    assert!((e.p - p).abs() < 1e-12);
    assert_eq!(verify(task, &task.canonical_response()), 1.0);
}

#[test]
fn gap_experiment_balances_each_polarity() {
    let policy = warm();
    let batch = mixed_batch(41, 8);
    let run = value_gap_experiment(policy, &batch, &small_config(), &Rng::new(0)).unwrap();
    let [np, nn] = run.cohort.per_class;
    assert!(np + nn > 0);
    assert_eq!(run.cohort.indices.len(), 2 * (np + nn));
    assert_eq!(run.report.positive.n_boosted, run.report.positive.n_suppressed);
    assert_eq!(run.report.negative.n_boosted, run.report.negative.n_suppressed);
    assert_eq!(run.paired_differences().len(), np + nn);
    assert_eq!(run.report.buckets.len(), DEFAULT_BUCKETS.len());
    let again = value_gap_experiment(policy, &batch, &small_config(), &Rng::new(0)).unwrap();
    assert_eq!(run.estimates, again.estimates);
    let mut csv = Vec::new();
    run.write_estimates_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), run.cohort.indices.len() + 1);
}

#[test]
fn budget_grid_rows_and_monotone_mixing() {
    let grid = [(4, 1), (4, 2), (4, 8)];
    let rows = budget_scaling_run(warm(), suite(), &grid, &small_config(), &Rng::new(5)).unwrap();
    assert_eq!(rows.len(), grid.len());
    assert_eq!(rows[0].mixed_groups, 0);
    assert_eq!(rows[0].per_class, [0, 0]);
    assert!(rows[0].gap.is_none());
    assert!(rows[1].mixed_groups <= rows[2].mixed_groups);
    assert!(budget_scaling_run(warm(), &TaskSuite { tasks: vec![] }, &grid, &small_config(), &Rng::new(5)).is_err());
}

#[test]
fn repeated_updates_emit_one_row_per_step() {
    let policy = warm();
    let batch = mixed_batch(42, 4);
    let rows = repeated_update_gap(policy, &batch, 3, &small_config(), &Rng::new(1)).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(repeated_update_gap(policy, &batch, 0, &small_config(), &Rng::new(1)).is_err());
}
