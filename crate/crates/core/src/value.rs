//! Monte Carlo counterfactual token values and the value gap between boosted
//! and suppressed tokens.
//!
//! The value of forcing token `o` at state `s` is estimated as
//! `(avg_forced − avg_free) / (1 − p)`, where `avg_forced` is the mean reward
//! of `M` completions after `s ⊕ o`, `avg_free` the mean reward of `M`
//! completions sampled from `s`, and `p = π(o | s)`.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::displacement::{measure_displacement, DeltaClass, TokenRecord, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::grpo::{continue_response, grpo_gradient, sample_batch, Clip, Decoding, Polarity, RolloutBatch, SamplingConfig, Sign};
use crate::policy::{Policy, Token};
use crate::report::{fmt_f64, fmt_opt, write_csv};
use crate::rng::Rng;
use crate::task::{verify, TaskInstance, TaskSuite};

pub const DEFAULT_M: usize = 256;
pub const DEFAULT_P_GUARD: f64 = 1e-3;
pub const DEFAULT_BUCKETS: [u32; 10] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100];

/// An environment whose token values can be estimated by rollouts.
pub trait TokenValueEnv: Sync {
    /// `π(token | prefix)`.
    fn token_prob(&self, prefix: &[Token], token: Token) -> Result<f64>;

    /// Samples a completion of `prefix` and returns its reward.
    fn complete(&self, prefix: &[Token], rng: &mut Rng) -> Result<f64>;
}

/// Completions sampled from a policy at temperature 1 and scored by the
/// task verifier.
pub struct PolicyEnv<'a> {
    policy: &'a Policy,
    instance: &'a TaskInstance,
    prompt: Vec<Token>,
    max_len: usize,
}

impl<'a> PolicyEnv<'a> {
    pub fn new(policy: &'a Policy, instance: &'a TaskInstance, max_len: usize) -> Self {
        Self {
            policy,
            instance,
            prompt: instance.prompt(),
            max_len,
        }
    }
}

impl TokenValueEnv for PolicyEnv<'_> {
    fn token_prob(&self, prefix: &[Token], token: Token) -> Result<f64> {
        let context: Vec<Token> = self.prompt.iter().chain(prefix).copied().collect();
        Ok(self.policy.trace_position(&context, token)?.confidence)
    }

    fn complete(&self, prefix: &[Token], rng: &mut Rng) -> Result<f64> {
        let (rest, _) = continue_response(
            self.policy,
            &self.prompt,
            prefix,
            Decoding::Sample { temperature: 1.0 },
            self.max_len,
            rng,
        )?;
        let full: Vec<Token> = prefix.iter().chain(&rest).copied().collect();
        Ok(verify(self.instance, &full))
    }
}

/// Single-decision environment: the first token is `correct` with
/// probability `p_correct` and uniform over the other `vocab − 1` tokens
/// otherwise. The reward is 1 exactly when the first token is `correct`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticEnv {
    pub p_correct: f64,
    pub correct: Token,
    pub vocab: usize,
}

impl AnalyticEnv {
    pub fn new(p_correct: f64, correct: Token, vocab: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&p_correct) || vocab < 2 || correct >= vocab {
            return Err(Error::InvalidConfig(
                "analytic env needs p in [0, 1), vocab >= 2 and a token inside the vocabulary".into(),
            ));
        }
        Ok(Self {
            p_correct,
            correct,
            vocab,
        })
    }

    fn first_token_prob(&self, token: Token) -> f64 {
        if token == self.correct {
            self.p_correct
        } else {
            (1.0 - self.p_correct) / (self.vocab - 1) as f64
        }
    }

    /// `E[Δ̂]` for forcing `token` as the first action.
    pub fn expected_value(&self, token: Token) -> f64 {
        let forced = if token == self.correct { 1.0 } else { 0.0 };
        (forced - self.p_correct) / (1.0 - self.first_token_prob(token))
    }
}

impl TokenValueEnv for AnalyticEnv {
    fn token_prob(&self, prefix: &[Token], token: Token) -> Result<f64> {
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: self.vocab,
            });
        }
        Ok(if prefix.is_empty() {
            self.first_token_prob(token)
        } else {
            1.0 / self.vocab as f64
        })
    }

    fn complete(&self, prefix: &[Token], rng: &mut Rng) -> Result<f64> {
        let first = match prefix.first() {
            Some(&t) => t,
            None if rng.uniform() < self.p_correct => self.correct,
            None => {
                // uniform over the remaining tokens
                let k = rng.below(self.vocab - 1);
                if k >= self.correct {
                    k + 1
                } else {
                    k
                }
            }
        };
        Ok(if first == self.correct { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub token: Token,
    pub p: f64,
    pub m: usize,
    pub avg_forced: f64,
    pub avg_free: f64,
    /// `(avg_forced − avg_free) / (1 − p)`
    pub delta_hat: f64,
    /// `avg_forced − avg_free`
    pub raw_diff: f64,
    pub se_forced: f64,
    pub se_free: f64,
}

impl ValueEstimate {
    /// Standard error of `delta_hat`.
    pub fn combined_se(&self) -> f64 {
        (self.se_forced.powi(2) + self.se_free.powi(2)).sqrt() / (1.0 - self.p)
    }
}

fn mean_and_se(rewards: &[f64]) -> (f64, f64) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean, (var / n).sqrt())
}

/// Counterfactual value of `token` after `prefix`, from `m` forced and `m`
/// free completions drawn from independent substreams of `rng`.
pub fn mc_token_value<E: TokenValueEnv + ?Sized>(
    env: &E,
    prefix: &[Token],
    token: Token,
    m: usize,
    p_guard: f64,
    rng: &Rng,
) -> Result<ValueEstimate> {
    if m == 0 {
        return Err(Error::InvalidConfig("M must be >= 1".into()));
    }
    let p = env.token_prob(prefix, token)?;
    if p > 1.0 - p_guard {
        return Err(Error::ProbabilityTooHigh { p, guard: p_guard });
    }
    let forced_prefix: Vec<Token> = prefix.iter().copied().chain([token]).collect();
    let branch = |label: &str, pre: &[Token]| -> Result<Vec<f64>> {
        let root = rng.split(label);
        (0..m)
            .into_par_iter()
            .map(|i| env.complete(pre, &mut root.split_index(i as u64)))
            .collect()
    };
    let forced = branch("forced", &forced_prefix)?;
    let free = branch("free", prefix)?;
    let (avg_forced, se_forced) = mean_and_se(&forced);
    let (avg_free, se_free) = mean_and_se(&free);
    let raw_diff = avg_forced - avg_free;
    Ok(ValueEstimate {
        token,
        p,
        m,
        avg_forced,
        avg_free,
        delta_hat: raw_diff / (1.0 - p),
        raw_diff,
        se_forced,
        se_free,
    })
}

const STRATA: [(Sign, DeltaClass); 4] = [
    (Sign::Positive, DeltaClass::Boosted),
    (Sign::Positive, DeltaClass::Suppressed),
    (Sign::Negative, DeltaClass::Boosted),
    (Sign::Negative, DeltaClass::Suppressed),
];

fn eligible(r: &TokenRecord, stratum: (Sign, DeltaClass), max_confidence: f64) -> bool {
    r.polarity == stratum.0 && r.class == stratum.1 && r.confidence <= max_confidence
}

/// Largest per-class count a balanced cohort can have.
pub fn max_balanced_per_class(records: &[TokenRecord], max_confidence: f64) -> usize {
    STRATA
        .iter()
        .map(|&s| records.iter().filter(|r| eligible(r, s, max_confidence)).count())
        .min()
        .unwrap_or(0)
}

/// Indices into `records`: `n_per_class` boosted and `n_per_class`
/// suppressed tokens from positive rollouts, then the same from negative
/// rollouts. Tokens with confidence above `max_confidence` are not eligible.
pub fn sample_value_cohort(
    records: &[TokenRecord],
    n_per_class: usize,
    max_confidence: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    draw_strata(records, [n_per_class; 4], max_confidence, rng)
}

/// A cohort balanced within each rollout polarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    /// Positive-rollout boosted, positive suppressed, negative boosted,
    /// negative suppressed, in that order.
    pub indices: Vec<usize>,
    /// Per-class count for positive and negative rollouts.
    pub per_class: [usize; 2],
}

/// Like [`sample_value_cohort`], but each polarity takes as many tokens per
/// class as it can supply, up to `cap`. A polarity lacking either class
/// contributes nothing.
pub fn sample_capped_cohort(
    records: &[TokenRecord],
    cap: usize,
    max_confidence: f64,
    rng: &mut Rng,
) -> Result<Cohort> {
    let avail: Vec<usize> = STRATA
        .iter()
        .map(|&s| records.iter().filter(|r| eligible(r, s, max_confidence)).count())
        .collect();
    let per_class = [cap.min(avail[0]).min(avail[1]), cap.min(avail[2]).min(avail[3])];
    let counts = [per_class[0], per_class[0], per_class[1], per_class[1]];
    let indices = draw_strata(records, counts, max_confidence, rng)?;
    Ok(Cohort { indices, per_class })
}

fn draw_strata(records: &[TokenRecord], counts: [usize; 4], max_confidence: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (stratum, n) in STRATA.into_iter().zip(counts) {
        let pool: Vec<usize> = (0..records.len())
            .filter(|&i| eligible(&records[i], stratum, max_confidence))
            .collect();
        if pool.len() < n {
            return Err(Error::Insufficient {
                what: format!(
                    "{} tokens in {} rollouts",
                    stratum.1.as_str(),
                    stratum.0.as_str()
                ),
                needed: n,
                have: pool.len(),
            });
        }
        out.extend(rng.sample_indices(pool.len(), n).into_iter().map(|i| pool[i]));
    }
    Ok(out)
}

/// Values the tokens `records[i]` for `i` in `indices` under `policy`.
/// Tokens at identical states share one estimate.
pub fn value_records(
    policy: &Policy,
    batch: &RolloutBatch,
    records: &[TokenRecord],
    indices: &[usize],
    config: &ValueConfig,
    rng: &Rng,
) -> Result<Vec<ValueEstimate>> {
    let key_of = |i: usize| {
        let r = &records[i];
        let tokens = &batch.groups[r.group].rollouts[r.rollout_idx].tokens;
        (r.group, tokens[..=r.pos].to_vec())
    };
    let mut unique: BTreeMap<(usize, Vec<Token>), Option<ValueEstimate>> = BTreeMap::new();
    for &i in indices {
        unique.insert(key_of(i), None);
    }
    let keys: Vec<(usize, Vec<Token>)> = unique.keys().cloned().collect();
    let estimates = keys
        .par_iter()
        .map(|(g, seq)| {
            let group = &batch.groups[*g];
            let env = PolicyEnv::new(policy, &group.instance, config.max_len.max(seq.len()));
            let (prefix, token) = seq.split_at(seq.len() - 1);
            let label = format!("{}:{:?}", group.query_id, seq);
            mc_token_value(&env, prefix, token[0], config.m, config.p_guard, &rng.split(&label))
        })
        .collect::<Result<Vec<_>>>()?;
    for (k, e) in keys.into_iter().zip(estimates) {
        unique.insert(k, Some(e));
    }
    Ok(indices
        .iter()
        .map(|&i| unique[&key_of(i)].clone().expect("every key is valued"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub polarity: String,
    pub n_boosted: usize,
    pub n_suppressed: usize,
    pub mean_boosted: Option<f64>,
    pub mean_suppressed: Option<f64>,
    pub gap: Option<f64>,
}

fn gap_cell(polarity: &str, joined: &[(&TokenRecord, &ValueEstimate)]) -> GapCell {
    let of = |c: DeltaClass| -> Vec<f64> {
        joined
            .iter()
            .filter(|(r, _)| r.class == c)
            .map(|(_, e)| e.delta_hat)
            .collect()
    };
    let (b, s) = (of(DeltaClass::Boosted), of(DeltaClass::Suppressed));
    let (mb, ms) = (crate::stats::mean(&b), crate::stats::mean(&s));
    GapCell {
        polarity: polarity.to_string(),
        n_boosted: b.len(),
        n_suppressed: s.len(),
        mean_boosted: mb,
        mean_suppressed: ms,
        gap: mb.zip(ms).map(|(x, y)| x - y),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub k: u32,
    pub n: usize,
    pub gap: Option<f64>,
}

/// Gap over the top-`k`% highest-entropy tokens for each `k`. Ties in
/// entropy keep input order.
pub fn entropy_bucket_gap(joined: &[(&TokenRecord, &ValueEstimate)], ks: &[u32]) -> Result<Vec<BucketRow>> {
    if joined.is_empty() {
        return Err(Error::Empty("valued tokens"));
    }
    let mut order: Vec<usize> = (0..joined.len()).collect();
    order.sort_by(|&a, &b| joined[b].0.entropy.total_cmp(&joined[a].0.entropy));
    ks.iter()
        .map(|&k| {
            if k == 0 || k > 100 {
                return Err(Error::InvalidConfig(format!("bucket k must be in 1..=100, got {k}")));
            }
            let n = (joined.len() * k as usize).div_ceil(100);
            let top: Vec<(&TokenRecord, &ValueEstimate)> = order[..n].iter().map(|&i| joined[i]).collect();
            Ok(BucketRow {
                k,
                n,
                gap: gap_cell("", &top).gap,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGapReport {
    pub positive: GapCell,
    pub negative: GapCell,
    pub pooled: GapCell,
    pub buckets: Vec<BucketRow>,
}

impl ValueGapReport {
    pub fn from_joined(joined: &[(&TokenRecord, &ValueEstimate)], ks: &[u32]) -> Result<Self> {
        let of = |s: Sign| -> Vec<(&TokenRecord, &ValueEstimate)> {
            joined.iter().copied().filter(|(r, _)| r.polarity == s).collect()
        };
        Ok(Self {
            positive: gap_cell("positive", &of(Sign::Positive)),
            negative: gap_cell("negative", &of(Sign::Negative)),
            pooled: gap_cell("pooled", joined),
            buckets: entropy_bucket_gap(joined, ks)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    pub eta: f64,
    pub eps: f64,
    pub n_per_class: usize,
    pub m: usize,
    pub p_guard: f64,
    pub buckets: Vec<u32>,
    pub max_len: usize,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            eta: crate::grpo::PROBE_LR,
            eps: DEFAULT_EPS,
            n_per_class: 16,
            m: DEFAULT_M,
            p_guard: DEFAULT_P_GUARD,
            buckets: DEFAULT_BUCKETS.to_vec(),
            max_len: SamplingConfig::default().max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueGapRun {
    pub records: Vec<TokenRecord>,
    pub cohort: Cohort,
    pub estimates: Vec<ValueEstimate>,
    pub report: ValueGapReport,
}

impl ValueGapRun {
    pub fn joined(&self) -> Vec<(&TokenRecord, &ValueEstimate)> {
        self.cohort
            .indices
            .iter()
            .zip(&self.estimates)
            .map(|(&i, e)| (&self.records[i], e))
            .collect()
    }

    /// Boosted minus suppressed `Δ̂`, pairing the cohort's strata in
    /// sampled order.
    pub fn paired_differences(&self) -> Vec<f64> {
        let [np, nn] = self.cohort.per_class;
        let mut out = Vec::with_capacity(np + nn);
        for (start, n) in [(0, np), (2 * np, nn)] {
            for i in 0..n {
                out.push(self.estimates[start + i].delta_hat - self.estimates[start + n + i].delta_hat);
            }
        }
        out
    }

    pub fn write_estimates_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv(
            w,
            &[
                "query_id",
                "rollout_idx",
                "pos",
                "token_id",
                "polarity",
                "class",
                "entropy",
                "p",
                "M",
                "avg_forced",
                "avg_free",
                "delta_hat",
                "raw_diff",
                "se_forced",
                "se_free",
            ],
            self.joined().into_iter().map(|(r, e)| {
                vec![
                    r.query_id.to_string(),
                    r.rollout_idx.to_string(),
                    r.pos.to_string(),
                    r.token.to_string(),
                    r.polarity.as_str().to_string(),
                    r.class.as_str().to_string(),
                    fmt_f64(r.entropy),
                    fmt_f64(e.p),
                    e.m.to_string(),
                    fmt_f64(e.avg_forced),
                    fmt_f64(e.avg_free),
                    fmt_f64(e.delta_hat),
                    fmt_f64(e.raw_diff),
                    fmt_f64(e.se_forced),
                    fmt_f64(e.se_free),
                ]
            }),
        )
    }
}

fn joint_update_records(policy: &Policy, batch: &RolloutBatch, eta: f64, eps: f64) -> Result<Vec<TokenRecord>> {
    let g = grpo_gradient(policy, batch, Polarity::Joint, Clip::Off)?;
    let after = policy.apply_delta(&g, eta)?;
    measure_displacement(policy, &after, batch, eps)
}

/// One joint SGD update, a cohort of its boosted and suppressed tokens
/// balanced within each polarity (at most `n_per_class` per class), and
/// their values under the pre-update policy.
pub fn value_gap_experiment(policy: &Policy, batch: &RolloutBatch, config: &ValueConfig, rng: &Rng) -> Result<ValueGapRun> {
    if config.n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    let records = joint_update_records(policy, batch, config.eta, config.eps)?;
    let cohort = sample_capped_cohort(&records, config.n_per_class, 1.0 - config.p_guard, &mut rng.split("cohort"))?;
    if cohort.indices.is_empty() {
        return Err(Error::Insufficient {
            what: "boosted/suppressed token pairs in either polarity".into(),
            needed: 1,
            have: 0,
        });
    }
    let estimates = value_records(policy, batch, &records, &cohort.indices, config, &rng.split("values"))?;
    let joined: Vec<(&TokenRecord, &ValueEstimate)> =
        cohort.indices.iter().zip(&estimates).map(|(&i, e)| (&records[i], e)).collect();
    let report = ValueGapReport::from_joined(&joined, &config.buckets)?;
    Ok(ValueGapRun {
        records,
        cohort,
        estimates,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub batch_size: usize,
    pub group_size: usize,
    pub mixed_groups: usize,
    /// Cohort tokens per class in positive and negative rollouts.
    pub per_class: [usize; 2],
    pub gap: Option<f64>,
    pub top25_gap: Option<f64>,
}

/// For each `(batch_size, group_size)` cell: sample that many tasks (the
/// same task sequence for every cell), one joint update, and a cohort
/// valuation. Each polarity's cohort shrinks to what the cell can supply.
pub fn budget_scaling_run(
    policy: &Policy,
    suite: &TaskSuite,
    grid: &[(usize, usize)],
    config: &ValueConfig,
    rng: &Rng,
) -> Result<Vec<BudgetRow>> {
    if suite.is_empty() {
        return Err(Error::Empty("task suite"));
    }
    grid.iter()
        .map(|&(batch_size, group_size)| {
            if batch_size == 0 || group_size == 0 {
                return Err(Error::InvalidConfig("grid values must be >= 1".into()));
            }
            let mut pick = rng.split("tasks");
            let ids: Vec<usize> = (0..batch_size).map(|_| pick.below(suite.len())).collect();
            let tasks: Vec<TaskInstance> = ids.iter().map(|&i| suite.tasks[i].clone()).collect();
            let sampling = SamplingConfig {
                group_size,
                max_len: config.max_len,
                ..SamplingConfig::default()
            };
            let batch = sample_batch(policy, &tasks, &ids, &sampling, &rng.split("rollouts"))?;
            let mixed_groups = batch.groups.iter().filter(|g| g.is_mixed()).count();
            let records = joint_update_records(policy, &batch, config.eta, config.eps)?;
            let cohort = sample_capped_cohort(&records, config.n_per_class, 1.0 - config.p_guard, &mut rng.split("cohort"))?;
            let (gap, top25_gap) = if cohort.indices.is_empty() {
                (None, None)
            } else {
                let est = value_records(policy, &batch, &records, &cohort.indices, config, &rng.split("values"))?;
                let joined: Vec<_> = cohort.indices.iter().zip(&est).map(|(&i, e)| (&records[i], e)).collect();
                let top = entropy_bucket_gap(&joined, &[25])?;
                (gap_cell("pooled", &joined).gap, top[0].gap)
            };
            Ok(BudgetRow {
                batch_size,
                group_size,
                mixed_groups,
                per_class: cohort.per_class,
                gap,
                top25_gap,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRow {
    pub step: usize,
    pub per_class: [usize; 2],
    pub gap: Option<f64>,
}

/// Applies `steps` joint SGD updates to the same batch. After each, tokens
/// are reclassified by their displacement from the starting policy and a
/// balanced cohort's value gap is measured. Values are taken under the
/// starting policy.
pub fn repeated_update_gap(
    policy: &Policy,
    batch: &RolloutBatch,
    steps: usize,
    config: &ValueConfig,
    rng: &Rng,
) -> Result<Vec<RepeatRow>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    let mut current = policy.clone();
    let mut rows = Vec::with_capacity(steps);
    let mut cache: BTreeMap<usize, ValueEstimate> = BTreeMap::new();
    for step in 1..=steps {
        let g = grpo_gradient(&current, batch, Polarity::Joint, Clip::Off)?;
        current = current.apply_delta(&g, config.eta)?;
        let records = measure_displacement(policy, &current, batch, config.eps)?;
        let cohort = sample_capped_cohort(
            &records,
            config.n_per_class,
            1.0 - config.p_guard,
            &mut rng.split("cohort").split_index(step as u64),
        )?;
        let per_class = cohort.per_class;
        let cohort = cohort.indices;
        if cohort.is_empty() {
            rows.push(RepeatRow {
                step,
                per_class,
                gap: None,
            });
            continue;
        }
        let missing: Vec<usize> = cohort.iter().copied().filter(|i| !cache.contains_key(i)).collect();
        let fresh = value_records(policy, batch, &records, &missing, config, &rng.split("values"))?;
        cache.extend(missing.into_iter().zip(fresh));
        let joined: Vec<_> = cohort.iter().map(|&i| (&records[i], &cache[&i])).collect();
        rows.push(RepeatRow {
            step,
            per_class,
            gap: gap_cell("pooled", &joined).gap,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub trial: usize,
    pub delta_hat: f64,
    pub expected: f64,
    pub combined_se: f64,
    pub within_3se: bool,
}

/// Repeated estimates of the correct token's value in an [`AnalyticEnv`].
pub fn analytic_calibration(env: &AnalyticEnv, trials: usize, m: usize, rng: &Rng) -> Result<Vec<CalibrationRow>> {
    let expected = env.expected_value(env.correct);
    (0..trials)
        .map(|trial| {
            let e = mc_token_value(env, &[], env.correct, m, DEFAULT_P_GUARD, &rng.split_index(trial as u64))?;
            let se = e.combined_se();
            Ok(CalibrationRow {
                trial,
                delta_hat: e.delta_hat,
                expected,
                combined_se: se,
                within_3se: (e.delta_hat - expected).abs() <= 3.0 * se,
            })
        })
        .collect()
}

pub fn write_bucket_csv<W: Write>(w: W, rows: &[BucketRow]) -> Result<()> {
    write_csv(
        w,
        &["k", "n", "gap"],
        rows.iter()
            .map(|r| vec![r.k.to_string(), r.n.to_string(), fmt_opt(r.gap)]),
    )
}

/// Mean `Δ̂` check: `Δ̂ · (1 − p)` reproduces the stored raw difference.
pub fn estimator_identity_error(e: &ValueEstimate) -> f64 {
    (e.delta_hat * (1.0 - e.p) - e.raw_diff).abs()
}
