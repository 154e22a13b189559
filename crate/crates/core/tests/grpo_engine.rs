mod common;

use common::*;
use proptest::prelude::*;
use tokenflip_core::grpo::*;
use tokenflip_core::policy::Policy;
use tokenflip_core::rng::Rng;
use tokenflip_core::task::{ANS, EOS};

#[test]
fn objective_gradient_matches_finite_differences() {
    let policy = warm();
    let batch = mixed_batch(1, 4);
    let grad = grpo_gradient(policy, &batch, Polarity::Joint, Clip::Off).unwrap();
    let mut rng = Rng::new(5);
    let h = 1e-5;
    let support: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    for _ in 0..40 {
        let i = support[rng.below(support.len())];
        let shifted = |d: f64| {
            let mut p = policy.params().to_vec();
            p[i] += d;
            objective(&Policy::from_params(*policy.config(), p).unwrap(), &batch)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!((fd - grad[i]).abs() < 1e-8, "coordinate {i}: fd {fd} vs {}", grad[i]);
    }
}

#[test]
fn joint_gradient_is_sum_of_polarities() {
    let policy = warm();
    let batch = mixed_batch(2, 8);
    let joint = grpo_gradient(policy, &batch, Polarity::Joint, Clip::Off).unwrap();
    let pos = grpo_gradient(policy, &batch, Polarity::PositiveOnly, Clip::Off).unwrap();
    let neg = grpo_gradient(policy, &batch, Polarity::NegativeOnly, Clip::Off).unwrap();
    for ((j, p), n) in joint.iter().zip(&pos).zip(&neg) {
        assert!((j - (p + n)).abs() <= 1e-12 * (1.0 + j.abs()));
    }
}

#[test]
fn clipping_is_inert_at_unit_ratio() {
    let policy = warm();
    let batch = mixed_batch(3, 8);
    let off = grpo_gradient(policy, &batch, Polarity::Joint, Clip::Off).unwrap();
    let on = grpo_gradient(policy, &batch, Polarity::Joint, Clip::standard()).unwrap();
    assert_eq!(off, on);
}

#[test]
fn clipped_rollout_contributes_nothing() {
    let policy = warm();
    let mut batch = handmade(&[vec![
        (1.0, vec![ANS, 11, EOS]),
        (0.0, vec![ANS, 7, EOS]),
        (1.0, vec![ANS, 11, EOS]),
        (0.0, vec![ANS, 8, EOS]),
    ]]);
    refresh_logp_old(policy, &mut batch);
    // ratio e^1 > 1 + 0.28 with a positive advantage: every token is clipped
    for lp in &mut batch.groups[0].rollouts[0].logp_old {
        *lp -= 1.0;
    }
    let clipped = grpo_gradient(policy, &batch, Polarity::Joint, Clip::standard()).unwrap();
    let mut silenced = batch.clone();
    silenced.groups[0].rollouts[0].advantage = 0.0;
    let reference = grpo_gradient(policy, &silenced, Polarity::Joint, Clip::standard()).unwrap();
    for (a, b) in clipped.iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-15);
    }
    let unclipped = grpo_gradient(policy, &batch, Polarity::Joint, Clip::Off).unwrap();
    assert_ne!(clipped, unclipped);
}

#[test]
fn small_sgd_step_increases_objective() {
    let policy = warm();
    let batch = mixed_batch(4, 8);
    let grad = grpo_gradient(policy, &batch, Polarity::Joint, Clip::Off).unwrap();
    let next = Optimizer::sgd(1e-3).step(policy, &grad).unwrap();
    assert!(objective(&next, &batch) > objective(policy, &batch));
    let same = Optimizer::sgd(0.0).step(policy, &grad).unwrap();
    assert_eq!(same.params(), policy.params());
}

#[test]
fn sampling_is_reproducible_and_seed_sensitive() {
    let a = batch_for(warm(), 9, 6, 8);
    let b = batch_for(warm(), 9, 6, 8);
    let c = batch_for(warm(), 10, 6, 8);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn smaller_groups_are_prefixes_of_larger_ones() {
    let small = batch_for(warm(), 12, 4, 2);
    let large = batch_for(warm(), 12, 4, 8);
    for (s, l) in small.groups.iter().zip(&large.groups) {
        for (rs, rl) in s.rollouts.iter().zip(&l.rollouts) {
            assert_eq!(rs.tokens, rl.tokens);
        }
    }
}

proptest! {
    #[test]
    fn advantages_are_zero_sum_with_unit_spread(bits in prop::collection::vec(any::<bool>(), 2..16)) {
        let rollouts: Vec<(f64, Vec<usize>)> = bits.iter().map(|&b| (f64::from(u8::from(b)), vec![ANS, EOS])).collect();
        let batch = handmade(&[rollouts]);
        let g = &batch.groups[0];
        let adv: Vec<f64> = g.rollouts.iter().map(|r| r.advantage).collect();
        let sum: f64 = adv.iter().sum();
        prop_assert!(sum.abs() < 1e-9);
        if g.degenerate {
            prop_assert!(adv.iter().all(|&a| a == 0.0));
        } else {
            let var = adv.iter().map(|a| a * a).sum::<f64>() / adv.len() as f64;
            prop_assert!((var - 1.0).abs() < 1e-9);
            for r in &g.rollouts {
                prop_assert_eq!(r.advantage > 0.0, r.reward == 1.0);
            }
        }
    }
}
