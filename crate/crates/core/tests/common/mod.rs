#![allow(dead_code)]

use std::sync::OnceLock;

use tokenflip_core::grpo::{normalize_advantages, sample_batch, QueryGroup, Rollout, RolloutBatch, SamplingConfig};
use tokenflip_core::policy::{ModelConfig, Policy, Token};
use tokenflip_core::pretrain::{warm_start, WarmStartConfig};
use tokenflip_core::rng::Rng;
use tokenflip_core::task::{SuiteSpec, TaskInstance, TaskKind, TaskSuite};

pub fn warm() -> &'static Policy {
    static P: OnceLock<Policy> = OnceLock::new();
    P.get_or_init(|| warm_start(ModelConfig::default(), &WarmStartConfig::default(), &Rng::new(0)).unwrap())
}

pub fn suite() -> &'static TaskSuite {
    static S: OnceLock<TaskSuite> = OnceLock::new();
    S.get_or_init(|| TaskSuite::generate(&SuiteSpec::default(), &mut Rng::new(1)).unwrap())
}

pub fn batch_for(policy: &Policy, seed: u64, n_tasks: usize, group_size: usize) -> RolloutBatch {
    let rng = Rng::new(seed);
    let ids = rng.split("tasks").sample_indices(suite().len(), n_tasks);
    let tasks: Vec<TaskInstance> = ids.iter().map(|&i| suite().tasks[i].clone()).collect();
    let sampling = SamplingConfig {
        group_size,
        ..SamplingConfig::default()
    };
    sample_batch(policy, &tasks, &ids, &sampling, &rng.split("rollouts")).unwrap()
}

/// A batch from the warm policy with at least one mixed-sign group.
pub fn mixed_batch(seed: u64, n_tasks: usize) -> RolloutBatch {
    (0..)
        .map(|i| batch_for(warm(), seed * 1000 + i, n_tasks, 8))
        .find(|b| b.has_mixed_group())
        .unwrap()
}

/// Hand-built groups with the given rewards and responses; advantages are
/// normalized per group.
pub fn handmade(groups: &[Vec<(f64, Vec<Token>)>]) -> RolloutBatch {
    let groups = groups
        .iter()
        .enumerate()
        .map(|(q, rs)| {
            let instance = TaskInstance::new(TaskKind::Sum, vec![3, 4]).unwrap();
            let mut g = QueryGroup {
                query_id: q,
                prompt: instance.prompt(),
                instance,
                rollouts: rs
                    .iter()
                    .map(|(r, tokens)| Rollout {
                        query_id: q,
                        tokens: tokens.clone(),
                        logp_old: vec![0.0; tokens.len()],
                        reward: *r,
                        advantage: 0.0,
                        truncated: false,
                    })
                    .collect(),
                degenerate: false,
            };
            normalize_advantages(&mut g);
            g
        })
        .collect();
    RolloutBatch::new(groups)
}

/// Replaces every `logp_old` with the policy's current log-probabilities.
pub fn refresh_logp_old(policy: &Policy, batch: &mut RolloutBatch) {
    for g in &mut batch.groups {
        for r in &mut g.rollouts {
            r.logp_old = policy.response_logps(&g.prompt, &r.tokens).unwrap();
        }
    }
}

/// `J = (1/N) Σ A log π`, computed from scratch.
pub fn objective(policy: &Policy, batch: &RolloutBatch) -> f64 {
    let n = batch.token_count() as f64;
    let mut j = 0.0;
    for g in &batch.groups {
        for r in &g.rollouts {
            j += r.advantage * policy.response_logps(&g.prompt, &r.tokens).unwrap().iter().sum::<f64>();
        }
    }
    j / n
}
