//! Per-token log-probability displacement across one update, its
//! classification, flip statistics, and the first-order prediction.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{Polarity, RolloutBatch, Sign, TokenRef};
use crate::policy::{Policy, Token};
use crate::report::{fmt_f64, write_csv};
use crate::stats;
use crate::task::{Category, TokenVocab};

pub const DEFAULT_EPS: f64 = 1e-6;
/// Default cap on response tokens for kernel-based computations.
pub const DEFAULT_MAX_KERNEL_TOKENS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaClass {
    Boosted,
    Suppressed,
    Stable,
}

impl DeltaClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DeltaClass::Boosted => "boosted",
            DeltaClass::Suppressed => "suppressed",
            DeltaClass::Stable => "stable",
        }
    }
}

pub fn classify(delta: f64, eps: f64) -> DeltaClass {
    if delta > eps {
        DeltaClass::Boosted
    } else if delta < -eps {
        DeltaClass::Suppressed
    } else {
        DeltaClass::Stable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub query_id: usize,
    pub group: usize,
    pub rollout_idx: usize,
    pub pos: usize,
    pub token: Token,
    pub category: Category,
    pub polarity: Sign,
    pub advantage: f64,
    pub logp_old: f64,
    pub logp_new: f64,
    pub delta: f64,
    pub class: DeltaClass,
    pub entropy: f64,
    pub confidence: f64,
}

impl TokenRecord {
    pub fn token_ref(&self) -> TokenRef {
        TokenRef {
            group: self.group,
            rollout: self.rollout_idx,
            pos: self.pos,
        }
    }
}

/// One record per response token, ordered by (group, rollout, position).
/// Entropy and confidence describe the `before` policy.
pub fn measure_displacement(
    before: &Policy,
    after: &Policy,
    batch: &RolloutBatch,
    eps: f64,
) -> Result<Vec<TokenRecord>> {
    if before.config() != after.config() {
        return Err(Error::ConfigMismatch);
    }
    let vocab = TokenVocab::new(before.config().vocab_size)?;
    let per_rollout = batch
        .rollout_refs()
        .into_par_iter()
        .map(|rr| -> Result<Vec<TokenRecord>> {
            let ro = batch.rollout(rr);
            if ro.is_empty() {
                return Ok(Vec::new());
            }
            let prompt = &batch.groups[rr.group].prompt;
            let old = before.forward(prompt, &ro.tokens)?;
            let new = after.response_logps(prompt, &ro.tokens)?;
            old.positions
                .iter()
                .zip(new)
                .enumerate()
                .map(|(t, (p, logp_new))| {
                    let delta = logp_new - p.logp;
                    if !delta.is_finite() {
                        return Err(Error::NonFinite("log-probability displacement"));
                    }
                    Ok(TokenRecord {
                        query_id: ro.query_id,
                        group: rr.group,
                        rollout_idx: rr.rollout,
                        pos: t,
                        token: p.token,
                        category: vocab.category(p.token)?,
                        polarity: ro.sign(),
                        advantage: ro.advantage,
                        logp_old: p.logp,
                        logp_new,
                        delta,
                        class: classify(delta, eps),
                        entropy: p.entropy,
                        confidence: p.confidence,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rollout.into_iter().flatten().collect())
}

pub const RECORD_CSV_HEADER: [&str; 12] = [
    "query_id",
    "rollout_idx",
    "pos",
    "token_id",
    "category",
    "polarity",
    "logp_old",
    "logp_new",
    "delta",
    "class",
    "entropy",
    "confidence",
];

pub fn write_records_csv<W: Write>(w: W, records: &[TokenRecord]) -> Result<()> {
    write_csv(
        w,
        &RECORD_CSV_HEADER,
        records.iter().map(|r| {
            vec![
                r.query_id.to_string(),
                r.rollout_idx.to_string(),
                r.pos.to_string(),
                r.token.to_string(),
                r.category.as_str().to_string(),
                r.polarity.as_str().to_string(),
                fmt_f64(r.logp_old),
                fmt_f64(r.logp_new),
                fmt_f64(r.delta),
                r.class.as_str().to_string(),
                fmt_f64(r.entropy),
                fmt_f64(r.confidence),
            ]
        }),
    )
}

/// Flip statistics for one polarity bucket. Ratios are `None` for an empty
/// bucket; magnitude statistics are `None` when their class is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRow {
    pub polarity: String,
    pub count: usize,
    pub boosted_ratio: Option<f64>,
    pub suppressed_ratio: Option<f64>,
    pub stable_ratio: Option<f64>,
    pub mean_abs_delta_boosted: Option<f64>,
    pub median_abs_delta_boosted: Option<f64>,
    pub mean_abs_delta_suppressed: Option<f64>,
    pub median_abs_delta_suppressed: Option<f64>,
}

impl FlipRow {
    fn from_records<'a>(polarity: &str, records: impl Iterator<Item = &'a TokenRecord>) -> Self {
        let mut counts = [0usize; 3];
        let mut boosted = Vec::new();
        let mut suppressed = Vec::new();
        for r in records {
            match r.class {
                DeltaClass::Boosted => {
                    counts[0] += 1;
                    boosted.push(r.delta.abs());
                }
                DeltaClass::Suppressed => {
                    counts[1] += 1;
                    suppressed.push(r.delta.abs());
                }
                DeltaClass::Stable => counts[2] += 1,
            }
        }
        let count: usize = counts.iter().sum();
        let ratio = |c: usize| (count > 0).then(|| c as f64 / count as f64);
        Self {
            polarity: polarity.to_string(),
            count,
            boosted_ratio: ratio(counts[0]),
            suppressed_ratio: ratio(counts[1]),
            stable_ratio: ratio(counts[2]),
            mean_abs_delta_boosted: stats::mean(&boosted),
            median_abs_delta_boosted: stats::median(&boosted),
            mean_abs_delta_suppressed: stats::mean(&suppressed),
            median_abs_delta_suppressed: stats::median(&suppressed),
        }
    }
}

/// `positive` and `negative` rows exclude zero-advantage tokens, which are
/// reported under `neutral`; `all` covers every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub positive: FlipRow,
    pub negative: FlipRow,
    pub all: FlipRow,
    pub neutral: FlipRow,
}

impl FlipReport {
    pub fn rows(&self) -> [&FlipRow; 4] {
        [&self.positive, &self.negative, &self.all, &self.neutral]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let opt = crate::report::fmt_opt;
        write_csv(
            w,
            &[
                "polarity",
                "count",
                "boosted_ratio",
                "suppressed_ratio",
                "stable_ratio",
                "mean_abs_delta_boosted",
                "median_abs_delta_boosted",
                "mean_abs_delta_suppressed",
                "median_abs_delta_suppressed",
            ],
            self.rows().into_iter().map(|r| {
                vec![
                    r.polarity.clone(),
                    r.count.to_string(),
                    opt(r.boosted_ratio),
                    opt(r.suppressed_ratio),
                    opt(r.stable_ratio),
                    opt(r.mean_abs_delta_boosted),
                    opt(r.median_abs_delta_boosted),
                    opt(r.mean_abs_delta_suppressed),
                    opt(r.median_abs_delta_suppressed),
                ]
            }),
        )
    }
}

pub fn flip_report(records: &[TokenRecord]) -> Result<FlipReport> {
    if records.is_empty() {
        return Err(Error::Empty("token records"));
    }
    let of = |s: Sign| records.iter().filter(move |r| r.polarity == s);
    Ok(FlipReport {
        positive: FlipRow::from_records("positive", of(Sign::Positive)),
        negative: FlipRow::from_records("negative", of(Sign::Negative)),
        all: FlipRow::from_records("all", records.iter()),
        neutral: FlipRow::from_records("neutral", of(Sign::Neutral)),
    })
}

/// Full-parameter score gradient for every response token, in
/// [`RolloutBatch::token_refs`] order.
pub fn token_gradients(policy: &Policy, batch: &RolloutBatch, max_tokens: usize) -> Result<Vec<Vec<f64>>> {
    let n = batch.token_count();
    if n > max_tokens {
        return Err(Error::BudgetExceeded {
            needed: n,
            limit: max_tokens,
        });
    }
    let per_rollout = batch
        .rollout_refs()
        .into_par_iter()
        .map(|rr| -> Result<Vec<Vec<f64>>> {
            let ro = batch.rollout(rr);
            if ro.is_empty() {
                return Ok(Vec::new());
            }
            let trace = policy.forward(&batch.groups[rr.group].prompt, &ro.tokens)?;
            (0..trace.len()).map(|t| policy.score_grad_full(&trace, t)).collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rollout.into_iter().flatten().collect())
}

/// `(η/N) Σ_k A_k ⟨g_j, g_k⟩` for every token `j`, with `A_k` the polarity
/// weight of token `k`'s rollout. Evaluated as `(η/N) ⟨g_j, Σ_k A_k g_k⟩`.
pub fn predict_displacement_first_order(
    policy: &Policy,
    batch: &RolloutBatch,
    eta: f64,
    polarity: Polarity,
    max_tokens: usize,
) -> Result<Vec<f64>> {
    let grads = token_gradients(policy, batch, max_tokens)?;
    let refs = batch.token_refs();
    let n = refs.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let mut direction = vec![0.0; policy.param_count()];
    for (tr, g) in refs.iter().zip(&grads) {
        let a = polarity.weight(&batch.groups[tr.group].rollouts[tr.rollout]);
        if a != 0.0 {
            for (d, v) in direction.iter_mut().zip(g) {
                *d += a * v;
            }
        }
    }
    let scale = eta / n as f64;
    Ok(grads
        .iter()
        .map(|g| scale * crate::numeric::dot_unchecked(g, &direction))
        .collect())
}
