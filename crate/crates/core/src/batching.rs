//! Mini-batch planning, the reward-balanced rollout buffer, and the
//! end-to-end training loop.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{
    gradient_on, sample_batch, Clip, Decoding, Optimizer, Polarity, QueryGroup, Rollout, RolloutBatch, RolloutRef,
    SamplingConfig, Scope, UpdateSpec,
};
use crate::policy::Policy;
use crate::report::{fmt_f64, write_csv};
use crate::rng::Rng;
use crate::task::{TaskInstance, TaskSuite};

pub const DEFAULT_MINIBATCHES: usize = 4;
pub const DEFAULT_STALENESS_CAP: usize = 4;
pub const TAU_PRESET_STRICT: f64 = 0.5;
pub const TAU_PRESET_LOOSE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Random,
    #[serde(rename = "qb")]
    QueryPreserved,
    SignPartition,
}

impl PlanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Random => "random",
            PlanMode::QueryPreserved => "qb",
            PlanMode::SignPartition => "sign_partition",
        }
    }
}

impl std::str::FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PlanMode::Random),
            "qb" => Ok(PlanMode::QueryPreserved),
            "sign_partition" => Ok(PlanMode::SignPartition),
            _ => Err(Error::InvalidConfig(format!(
                "unknown plan mode `{s}` (expected random, qb or sign_partition)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniBatch {
    pub members: Vec<RolloutRef>,
    /// `S_B = Σ Â_i` over members.
    pub s_b: f64,
    /// `S_B² − Σ Â_i²`
    pub cross_proxy: f64,
}

impl MiniBatch {
    fn new(batch: &RolloutBatch, members: Vec<RolloutRef>) -> Self {
        let adv: Vec<f64> = members.iter().map(|&r| batch.rollout(r).advantage).collect();
        let s_b: f64 = adv.iter().sum();
        let sq: f64 = adv.iter().map(|a| a * a).sum();
        Self {
            members,
            s_b,
            cross_proxy: s_b * s_b - sq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniBatchPlan {
    pub mode: PlanMode,
    pub minibatches: Vec<MiniBatch>,
    /// Zero-advantage rollouts left out of the plan.
    pub dropped_neutral: usize,
}

impl MiniBatchPlan {
    pub fn max_abs_s_b(&self) -> f64 {
        self.minibatches.iter().map(|m| m.s_b.abs()).fold(0.0, f64::max)
    }
}

/// Shuffles every rollout and slices the result into `n` near-equal parts.
pub fn plan_random(batch: &RolloutBatch, n: usize, rng: &mut Rng) -> Result<MiniBatchPlan> {
    if n == 0 {
        return Err(Error::InvalidConfig("n_minibatches must be >= 1".into()));
    }
    let mut refs = batch.rollout_refs();
    rng.shuffle(&mut refs);
    let total = refs.len();
    let parts = n.min(total.max(1));
    let minibatches = (0..parts)
        .map(|b| MiniBatch::new(batch, refs[b * total / parts..(b + 1) * total / parts].to_vec()))
        .filter(|m| !m.members.is_empty())
        .collect();
    Ok(MiniBatchPlan {
        mode: PlanMode::Random,
        minibatches,
        dropped_neutral: 0,
    })
}

/// Assigns whole groups to `n` mini-batches, largest group first, each to
/// the currently smallest mini-batch.
pub fn plan_query_preserved(batch: &RolloutBatch, n: usize) -> Result<MiniBatchPlan> {
    if n == 0 {
        return Err(Error::InvalidConfig("n_minibatches must be >= 1".into()));
    }
    let total = batch.rollout_count();
    let capacity = total.div_ceil(n);
    if let Some(g) = batch.groups.iter().find(|g| g.rollouts.len() > capacity) {
        return Err(Error::GroupTooLarge {
            group: g.rollouts.len(),
            capacity,
        });
    }
    let mut order: Vec<usize> = (0..batch.groups.len()).collect();
    order.sort_by_key(|&g| std::cmp::Reverse(batch.groups[g].rollouts.len()));
    let parts = n.min(batch.groups.len().max(1));
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); parts];
    let mut sizes = vec![0usize; parts];
    for g in order {
        let b = (0..parts).min_by_key(|&b| (sizes[b], b)).expect("at least one bin");
        sizes[b] += batch.groups[g].rollouts.len();
        bins[b].push(g);
    }
    let minibatches = bins
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(|mut groups| {
            groups.sort_unstable();
            let members = groups
                .into_iter()
                .flat_map(|g| (0..batch.groups[g].rollouts.len()).map(move |r| RolloutRef { group: g, rollout: r }))
                .collect();
            MiniBatch::new(batch, members)
        })
        .collect();
    Ok(MiniBatchPlan {
        mode: PlanMode::QueryPreserved,
        minibatches,
        dropped_neutral: 0,
    })
}

/// Positive-advantage rollouts, then negative-advantage rollouts.
pub fn plan_sign_partition(batch: &RolloutBatch) -> Result<MiniBatchPlan> {
    let refs = batch.rollout_refs();
    let pick = |pred: fn(f64) -> bool| -> Vec<RolloutRef> {
        refs.iter().copied().filter(|&r| pred(batch.rollout(r).advantage)).collect()
    };
    let positive = pick(|a| a > 0.0);
    let negative = pick(|a| a < 0.0);
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::SingleSign);
    }
    let dropped_neutral = refs.len() - positive.len() - negative.len();
    Ok(MiniBatchPlan {
        mode: PlanMode::SignPartition,
        minibatches: vec![MiniBatch::new(batch, positive), MiniBatch::new(batch, negative)],
        dropped_neutral,
    })
}

pub fn plan(batch: &RolloutBatch, mode: PlanMode, n: usize, rng: &mut Rng) -> Result<MiniBatchPlan> {
    match mode {
        PlanMode::Random => plan_random(batch, n, rng),
        PlanMode::QueryPreserved => plan_query_preserved(batch, n),
        PlanMode::SignPartition => plan_sign_partition(batch),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Buffered {
    query_id: usize,
    instance: TaskInstance,
    rollout: Rollout,
    neutral: bool,
    age: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmitOutcome {
    pub batch: Option<RolloutBatch>,
    pub evicted: usize,
}

/// Accumulates rollouts until a batch with enough of both reward signs can
/// be formed. Positive and negative counts exclude rollouts of degenerate
/// groups, which ride along as zero-weight passengers.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBuffer {
    tau: f64,
    target: usize,
    staleness_cap: usize,
    entries: VecDeque<Buffered>,
}

/// Smallest count satisfying `count ≥ τ·B`.
fn min_per_sign(tau: f64, target: usize) -> usize {
    let need = tau * target as f64;
    let c = need.ceil();
    // absorb representation error such as 0.3 * 10 = 3.0000000000000004
    if c - need > 1.0 - 1e-9 {
        (c - 1.0) as usize
    } else {
        c as usize
    }
}

/// Positive-count range `[lo, hi]` of a feasible batch, if any.
pub fn feasible_positive_range(n_pos: usize, n_neg: usize, tau: f64, target: usize) -> Option<(usize, usize)> {
    let min = min_per_sign(tau, target);
    let lo = min.max(target.saturating_sub(n_neg));
    let hi = n_pos.min(target.saturating_sub(min));
    (lo <= hi && min <= target && n_pos + n_neg >= target).then_some((lo, hi))
}

impl RewardBuffer {
    pub fn new(tau: f64, target: usize) -> Result<Self> {
        if !(0.0..=0.5).contains(&tau) {
            return Err(Error::InvalidTau(tau));
        }
        if target == 0 {
            return Err(Error::InvalidConfig("buffer target size must be >= 1".into()));
        }
        Ok(Self {
            tau,
            target,
            staleness_cap: DEFAULT_STALENESS_CAP,
            entries: VecDeque::new(),
        })
    }

    pub fn with_staleness_cap(mut self, cap: usize) -> Self {
        self.staleness_cap = cap;
        self
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.entries.iter().filter(|e| !e.neutral && e.rollout.reward == 1.0).count()
    }

    pub fn n_neg(&self) -> usize {
        self.entries.iter().filter(|e| !e.neutral && e.rollout.reward != 1.0).count()
    }

    pub fn n_neutral(&self) -> usize {
        self.entries.iter().filter(|e| e.neutral).count()
    }

    pub fn offer(&mut self, group: &QueryGroup) {
        for r in &group.rollouts {
            self.entries.push_back(Buffered {
                query_id: group.query_id,
                instance: group.instance.clone(),
                rollout: r.clone(),
                neutral: group.degenerate,
                age: 0,
            });
        }
    }

    pub fn can_emit(&self) -> bool {
        feasible_positive_range(self.n_pos(), self.n_neg(), self.tau, self.target).is_some()
    }

    /// Emits a batch of `target` signed rollouts (plus every buffered
    /// passenger) when the balance constraint can be met, taking the oldest
    /// rollouts of each sign and topping up with the majority sign. Every
    /// call ages the remaining rollouts and evicts those past the staleness
    /// cap.
    pub fn try_emit(&mut self) -> EmitOutcome {
        let (n_pos, n_neg) = (self.n_pos(), self.n_neg());
        let mut out = EmitOutcome::default();
        if let Some((lo, hi)) = feasible_positive_range(n_pos, n_neg, self.tau, self.target) {
            let k_pos = if n_pos >= n_neg { hi } else { lo };
            let k_neg = self.target - k_pos;
            let (mut taken_pos, mut taken_neg) = (0, 0);
            let mut emitted = Vec::new();
            let mut kept = VecDeque::new();
            for e in self.entries.drain(..) {
                let take = if e.neutral {
                    true
                } else if e.rollout.reward == 1.0 {
                    taken_pos < k_pos && {
                        taken_pos += 1;
                        true
                    }
                } else {
                    taken_neg < k_neg && {
                        taken_neg += 1;
                        true
                    }
                };
                if take {
                    emitted.push(e);
                } else {
                    kept.push_back(e);
                }
            }
            self.entries = kept;
            out.batch = Some(regroup(emitted));
        }
        for e in &mut self.entries {
            e.age += 1;
        }
        let before = self.entries.len();
        let cap = self.staleness_cap;
        self.entries.retain(|e| e.age <= cap);
        out.evicted = before - self.entries.len();
        out
    }
}

/// Rebuilds query groups from emitted rollouts, keeping first-seen order.
fn regroup(entries: Vec<Buffered>) -> RolloutBatch {
    let mut groups: Vec<QueryGroup> = Vec::new();
    for e in entries {
        match groups.iter_mut().find(|g| g.query_id == e.query_id) {
            Some(g) => g.rollouts.push(e.rollout),
            None => groups.push(QueryGroup {
                query_id: e.query_id,
                prompt: e.instance.prompt(),
                instance: e.instance,
                rollouts: vec![e.rollout],
                degenerate: e.neutral,
            }),
        }
    }
    RolloutBatch::new(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Queries sampled per step.
    pub batch_size: usize,
    pub group_size: usize,
    pub minibatches: usize,
    pub plan_mode: PlanMode,
    /// Reward-balanced gate threshold; `None` disables the buffer.
    pub rb_tau: Option<f64>,
    pub lr: f64,
    pub clip: bool,
    pub eval_every: usize,
    pub max_len: usize,
    pub temperature: f64,
    /// Sampled responses per suite task at evaluation; 0 evaluates greedily.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            group_size: crate::grpo::DEFAULT_GROUP_SIZE,
            minibatches: DEFAULT_MINIBATCHES,
            plan_mode: PlanMode::Random,
            rb_tau: None,
            lr: crate::grpo::TRAIN_LR,
            clip: true,
            eval_every: 10,
            max_len: 6,
            temperature: 1.0,
            eval_samples: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidConfig(format!("train.{field}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.group_size == 0 {
            return bad("group_size", "must be >= 1");
        }
        if self.minibatches == 0 {
            return bad("minibatches", "must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and >= 0");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be >= 1");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be > 0");
        }
        if let Some(tau) = self.rb_tau {
            if !(0.0..=0.5).contains(&tau) {
                return bad("rb_tau", &Error::InvalidTau(tau).to_string());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub plan_mode: PlanMode,
    pub rb_tau: Option<f64>,
    /// Greedy suite accuracy; present on evaluation steps.
    pub eval_reward: Option<f64>,
    pub train_reward: Option<f64>,
    pub max_abs_s_b: Option<f64>,
    /// Cumulative updates batches released by the buffer (or sampled batches
    /// when the buffer is off).
    pub emitted_batches: usize,
    pub evicted_count: usize,
}

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "plan_mode",
    "rb_tau",
    "eval_reward",
    "train_reward",
    "max_abs_S_B",
    "emitted_batches",
    "evicted_count",
];

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let opt = crate::report::fmt_opt;
    write_csv(
        w,
        &METRICS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.plan_mode.as_str().to_string(),
                r.rb_tau.map(fmt_f64).unwrap_or_else(|| "off".into()),
                opt(r.eval_reward),
                opt(r.train_reward),
                opt(r.max_abs_s_b),
                r.emitted_batches.to_string(),
                r.evicted_count.to_string(),
            ]
        }),
    )
}

/// Mean reward over the suite: greedy when `samples` is 0, otherwise the
/// average of `samples` sampled responses per task drawn from `rng`.
pub fn evaluate(policy: &Policy, suite: &TaskSuite, max_len: usize, samples: usize, rng: &Rng) -> Result<f64> {
    if samples == 0 {
        return crate::pretrain::greedy_accuracy(policy, suite, max_len);
    }
    if suite.is_empty() {
        return Err(Error::Empty("task suite"));
    }
    let ids: Vec<usize> = (0..suite.len()).collect();
    let sampling = SamplingConfig {
        group_size: samples,
        decoding: Decoding::default(),
        max_len,
    };
    Ok(sample_batch(policy, &suite.tasks, &ids, &sampling, rng)?.mean_reward())
}

/// Sample, verify, normalize, gate, plan, then update sequentially on each
/// mini-batch. Row 0 is the initial evaluation; the suite is evaluated every
/// `eval_every` steps and at the final step.
pub fn run_training(
    initial: &Policy,
    suite: &TaskSuite,
    config: &TrainConfig,
    rng: &Rng,
) -> Result<(Policy, Vec<MetricsRow>)> {
    config.validate()?;
    if suite.is_empty() {
        return Err(Error::Empty("task suite"));
    }
    let mut policy = initial.clone();
    let mut optimizer = Optimizer::sgd(config.lr);
    let mut buffer = config
        .rb_tau
        .map(|tau| RewardBuffer::new(tau, config.batch_size * config.group_size))
        .transpose()?;
    let sampling = SamplingConfig {
        group_size: config.group_size,
        decoding: Decoding::Sample {
            temperature: config.temperature,
        },
        max_len: config.max_len,
    };
    let clip = if config.clip { Clip::standard() } else { Clip::Off };
    // every evaluation reuses one stream so that successive readings differ only through the policy
    let eval_rng = rng.split("eval");
    let mut rows = vec![MetricsRow {
        step: 0,
        plan_mode: config.plan_mode,
        rb_tau: config.rb_tau,
        eval_reward: Some(evaluate(&policy, suite, config.max_len, config.eval_samples, &eval_rng)?),
        train_reward: None,
        max_abs_s_b: None,
        emitted_batches: 0,
        evicted_count: 0,
    }];
    let (mut emitted, mut evicted) = (0usize, 0usize);
    let mut next_query = 0usize;
    for step in 1..=config.steps {
        let step_rng = rng.split("step").split_index(step as u64);
        let mut pick = step_rng.split("tasks");
        let idx: Vec<usize> = (0..config.batch_size).map(|_| pick.below(suite.len())).collect();
        let tasks: Vec<TaskInstance> = idx.iter().map(|&i| suite.tasks[i].clone()).collect();
        let ids: Vec<usize> = (next_query..next_query + tasks.len()).collect();
        next_query += tasks.len();
        let sampled = sample_batch(&policy, &tasks, &ids, &sampling, &step_rng.split("rollouts"))?;
        let train_reward = sampled.mean_reward();
        let ready = match buffer.as_mut() {
            None => Some(sampled),
            Some(buf) => {
                for g in &sampled.groups {
                    buf.offer(g);
                }
                let out = buf.try_emit();
                evicted += out.evicted;
                out.batch
            }
        };
        let mut max_abs_s_b = None;
        if let Some(batch) = ready {
            emitted += 1;
            let plan = match plan(&batch, config.plan_mode, config.minibatches, &mut step_rng.split("plan")) {
                Ok(p) => Some(p),
                // a sign partition needs both signs; otherwise the batch is skipped
                Err(Error::SingleSign) => None,
                Err(e) => return Err(e),
            };
            if let Some(plan) = plan {
                max_abs_s_b = Some(plan.max_abs_s_b());
                for mb in &plan.minibatches {
                    let spec = UpdateSpec {
                        polarity: Polarity::Joint,
                        clip,
                        scope: Scope::Full,
                        masked: None,
                    };
                    let grad = gradient_on(&policy, &batch, &mb.members, &spec)?;
                    policy = optimizer.step(&policy, &grad)?;
                }
            }
        }
        let eval_reward = if step % config.eval_every == 0 || step == config.steps {
            Some(evaluate(&policy, suite, config.max_len, config.eval_samples, &eval_rng)?)
        } else {
            None
        };
        rows.push(MetricsRow {
            step,
            plan_mode: config.plan_mode,
            rb_tau: config.rb_tau,
            eval_reward,
            train_reward: Some(train_reward),
            max_abs_s_b,
            emitted_batches: emitted,
            evicted_count: evicted,
        });
    }
    Ok((policy, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{TaskKind, ANS, EOS};

    pub(crate) fn batch_with(advantages: &[&[f64]]) -> RolloutBatch {
        let groups = advantages
            .iter()
            .enumerate()
            .map(|(q, adv)| {
                let instance = TaskInstance::new(TaskKind::Sum, vec![1, 2]).unwrap();
                QueryGroup {
                    query_id: q,
                    prompt: instance.prompt(),
                    instance,
                    rollouts: adv
                        .iter()
                        .map(|&a| Rollout {
                            query_id: q,
                            tokens: vec![ANS, 7, EOS],
                            logp_old: vec![0.0; 3],
                            reward: if a > 0.0 { 1.0 } else { 0.0 },
                            advantage: a,
                            truncated: false,
                        })
                        .collect(),
                    degenerate: adv.iter().all(|&a| a == 0.0),
                }
            })
            .collect();
        RolloutBatch::new(groups)
    }

    #[test]
    fn single_minibatch_is_the_batch() {
        let b = batch_with(&[&[1.0, -1.0], &[1.0, -1.0]]);
        let p = plan_random(&b, 1, &mut Rng::new(0)).unwrap();
        assert_eq!(p.minibatches.len(), 1);
        let mut m = p.minibatches[0].members.clone();
        m.sort();
        assert_eq!(m, b.rollout_refs());
        assert!(plan_random(&b, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn query_preserved_fixture() {
        let adv: &[f64] = &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
        let b = batch_with(&[adv, adv, adv, adv]);
        let p = plan_query_preserved(&b, 2).unwrap();
        assert_eq!(p.minibatches.len(), 2);
        for mb in &p.minibatches {
            assert_eq!(mb.members.len(), 16);
            assert_eq!(mb.s_b, 0.0);
        }
        assert!(matches!(
            plan_query_preserved(&b, 8),
            Err(Error::GroupTooLarge { group: 8, capacity: 4 })
        ));
    }

    #[test]
    fn sign_partition_fixture() {
        let b = batch_with(&[&[1.0, 1.0, -1.0, -1.0]]);
        let p = plan_sign_partition(&b).unwrap();
        assert_eq!(p.minibatches.len(), 2);
        assert_eq!(p.minibatches[0].s_b, 2.0);
        assert_eq!(p.minibatches[1].s_b, -2.0);
        // S² − ΣÂ² = 4 − 2
        assert_eq!(p.minibatches[0].cross_proxy, 2.0);
        assert!(matches!(plan_sign_partition(&batch_with(&[&[1.0, 0.0]])), Err(Error::SingleSign)));
        let with_neutral = batch_with(&[&[1.0, -1.0], &[0.0, 0.0]]);
        assert_eq!(plan_sign_partition(&with_neutral).unwrap().dropped_neutral, 2);
    }

    fn signed_group(q: usize, pos: usize, neg: usize) -> QueryGroup {
        let mut adv = vec![1.0; pos];
        adv.extend(vec![-1.0; neg]);
        batch_with(&[&adv]).groups.remove(0).tap_id(q)
    }

    trait TapId {
        fn tap_id(self, q: usize) -> Self;
    }

    impl TapId for QueryGroup {
        fn tap_id(mut self, q: usize) -> Self {
            self.query_id = q;
            for r in &mut self.rollouts {
                r.query_id = q;
            }
            self
        }
    }

    #[test]
    fn gate_fixtures() {
        let mut buf = RewardBuffer::new(0.25, 8).unwrap();
        buf.offer(&signed_group(0, 3, 5));
        assert!(buf.can_emit());
        let out = buf.try_emit();
        let batch = out.batch.unwrap();
        assert_eq!(batch.rollout_count(), 8);
        assert!(buf.is_empty());

        let mut buf = RewardBuffer::new(0.5, 8).unwrap();
        buf.offer(&signed_group(0, 3, 5));
        assert!(!buf.can_emit());
        assert!(buf.try_emit().batch.is_none());
        assert_eq!(buf.len(), 8);
        assert!(matches!(RewardBuffer::new(0.6, 8), Err(Error::InvalidTau(_))));
    }

    #[test]
    fn one_sided_stream_is_evicted() {
        let mut buf = RewardBuffer::new(0.5, 4).unwrap();
        buf.offer(&signed_group(0, 4, 0));
        let mut evicted = 0;
        for _ in 0..5 {
            evicted += buf.try_emit().evicted;
        }
        assert_eq!(evicted, 4);
        assert!(buf.is_empty());
    }

    #[test]
    fn oldest_first_and_majority_top_up() {
        let mut buf = RewardBuffer::new(0.25, 4).unwrap();
        buf.offer(&signed_group(0, 1, 2));
        buf.offer(&signed_group(1, 3, 0));
        // N+ = 4, N- = 2: lo = max(1, 2) = 2, hi = min(4, 3) = 3, positives are the majority
        let batch = buf.try_emit().batch.unwrap();
        let pos = batch.groups.iter().flat_map(|g| &g.rollouts).filter(|r| r.reward == 1.0).count();
        assert_eq!(pos, 3);
        assert_eq!(batch.groups[0].query_id, 0);
        assert_eq!(buf.n_pos(), 1);
        assert_eq!(buf.n_neg(), 1);
    }

    #[test]
    fn tau_boundaries() {
        assert_eq!(min_per_sign(0.3, 10), 3);
        assert_eq!(min_per_sign(0.25, 8), 2);
        assert_eq!(min_per_sign(0.5, 8), 4);
        assert_eq!(min_per_sign(0.0, 8), 0);
    }

    #[test]
    fn plan_mode_names() {
        for m in [PlanMode::Random, PlanMode::QueryPreserved, PlanMode::SignPartition] {
            assert_eq!(m.as_str().parse::<PlanMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
    }
}
