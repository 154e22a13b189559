//! Within-group gradient cancellation: the norm expansion of a group's
//! update, the zero-sum filter on shared directions, and the controlled
//! comparison of single-polarity against joint updates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::displacement::{measure_displacement, TokenRecord};
use crate::error::{Error, Result};
use crate::grpo::{grpo_gradient, Clip, Polarity, QueryGroup, RolloutBatch};
use crate::numeric::dot_unchecked;
use crate::policy::Policy;
use crate::report::{fmt_f64, fmt_opt, write_csv};
use crate::task::Category;

/// Tolerance for treating a set of advantages as zero-sum.
pub const ZERO_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupGradientStats {
    pub query_id: usize,
    pub advantages: Vec<f64>,
    /// `Σ_i Â_i² ‖d_i‖²`
    pub self_term: f64,
    /// `Σ_{i≠j} Â_i Â_j ⟨d_i, d_j⟩`
    pub cross_term: f64,
    /// `‖Σ_i Â_i d_i‖²`, computed directly.
    pub total: f64,
    /// Mean off-diagonal overlap `⟨d_i, d_j⟩`.
    pub mean_overlap: f64,
    /// Population std of the off-diagonal overlaps.
    pub overlap_std: f64,
    pub cross_negative: bool,
    /// Response-level directions `d_i = Σ_t g_{i,t}`.
    #[serde(skip)]
    pub directions: Vec<Vec<f64>>,
}

impl GroupGradientStats {
    /// `Σ_{i≠j} Â_i Â_j`
    pub fn advantage_cross_sum(&self) -> f64 {
        let a = &self.advantages;
        let mut s = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j {
                    s += a[i] * a[j];
                }
            }
        }
        s
    }
}

/// Unweighted token-sum direction of one rollout.
fn response_direction(policy: &Policy, group: &QueryGroup, i: usize) -> Result<Vec<f64>> {
    let mut d = vec![0.0; policy.param_count()];
    let ro = &group.rollouts[i];
    if ro.is_empty() {
        return Ok(d);
    }
    let trace = policy.forward(&group.prompt, &ro.tokens)?;
    for pos in &trace.positions {
        policy.accumulate_score_grad(pos, 1.0, &mut d);
    }
    Ok(d)
}

pub fn group_gradient_stats(policy: &Policy, group: &QueryGroup) -> Result<GroupGradientStats> {
    if group.degenerate || group.rollouts.iter().all(|r| r.advantage == 0.0) {
        return Err(Error::DegenerateGroup);
    }
    let g = group.rollouts.len();
    let advantages: Vec<f64> = group.rollouts.iter().map(|r| r.advantage).collect();
    let directions = (0..g)
        .map(|i| response_direction(policy, group, i))
        .collect::<Result<Vec<_>>>()?;
    let mut gram = vec![vec![0.0; g]; g];
    for i in 0..g {
        for j in i..g {
            let v = dot_unchecked(&directions[i], &directions[j]);
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let mut self_term = 0.0;
    let mut cross_term = 0.0;
    let mut overlaps = Vec::with_capacity(g * g.saturating_sub(1));
    for i in 0..g {
        self_term += advantages[i].powi(2) * gram[i][i];
        for j in 0..g {
            if i != j {
                cross_term += advantages[i] * advantages[j] * gram[i][j];
                overlaps.push(gram[i][j]);
            }
        }
    }
    let mut combined = vec![0.0; policy.param_count()];
    for (a, d) in advantages.iter().zip(&directions) {
        for (c, v) in combined.iter_mut().zip(d) {
            *c += a * v;
        }
    }
    let total = dot_unchecked(&combined, &combined);
    let mean_overlap = crate::stats::mean(&overlaps).unwrap_or(0.0);
    let overlap_std = crate::stats::std_pop(&overlaps).unwrap_or(0.0);
    Ok(GroupGradientStats {
        query_id: group.query_id,
        advantages,
        self_term,
        cross_term,
        total,
        mean_overlap,
        overlap_std,
        cross_negative: cross_term < 0.0,
        directions,
    })
}

/// `−c_q Σ_i Â_i²`, the cross term when every pairwise overlap equals `c_q`.
pub fn idealized_cross_term(advantages: &[f64], c_q: f64) -> Result<f64> {
    let sum: f64 = advantages.iter().sum();
    if sum.abs() > ZERO_SUM_TOL {
        return Err(Error::NotZeroSum(sum));
    }
    if !(c_q > 0.0 && c_q.is_finite()) {
        return Err(Error::InvalidConfig(format!("c_q must be positive, got {c_q}")));
    }
    Ok(-c_q * advantages.iter().map(|a| a * a).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSignal {
    /// `m_i = ⟨d_i, u⟩`
    pub loadings: Vec<f64>,
    pub mean_loading: f64,
    /// `Σ_i Â_i m_i`
    pub signal: f64,
    /// `Σ_i Â_i (m_i − m̄)`
    pub signal_centered: f64,
}

/// Signal carried by direction `u` through the group update. Both forms agree
/// for zero-sum advantages.
pub fn filter_signal(stats: &GroupGradientStats, u: &[f64]) -> Result<FilterSignal> {
    if u.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroDirection);
    }
    let loadings = stats
        .directions
        .iter()
        .map(|d| {
            if d.len() != u.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("direction of length {}", d.len()),
                    got: format!("{}", u.len()),
                });
            }
            Ok(dot_unchecked(d, u))
        })
        .collect::<Result<Vec<_>>>()?;
    filter_signal_from_loadings(&stats.advantages, loadings)
}

pub fn filter_signal_from_loadings(advantages: &[f64], loadings: Vec<f64>) -> Result<FilterSignal> {
    if advantages.len() != loadings.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} loadings", advantages.len()),
            got: format!("{}", loadings.len()),
        });
    }
    let mean_loading = crate::stats::mean(&loadings).ok_or(Error::Empty("loadings"))?;
    let signal = advantages.iter().zip(&loadings).map(|(a, m)| a * m).sum();
    let signal_centered = advantages
        .iter()
        .zip(&loadings)
        .map(|(a, m)| a * (m - mean_loading))
        .sum();
    Ok(FilterSignal {
        loadings,
        mean_loading,
        signal,
        signal_centered,
    })
}

/// Boost (positive Δ) and suppression (negative Δ) mass for one category
/// under one update variant. Fractions are `None` when the variant moved no
/// mass in that direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMass {
    pub category: Category,
    pub variant: Polarity,
    pub boost_mass: f64,
    pub boost_fraction: Option<f64>,
    pub suppress_mass: f64,
    pub suppress_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBoostReport {
    pub rows: Vec<CategoryMass>,
}

impl CategoryBoostReport {
    pub fn from_records(variants: &[(Polarity, &[TokenRecord])]) -> Self {
        let mut rows = Vec::new();
        for &(variant, records) in variants {
            let boost_total: f64 = records.iter().map(|r| r.delta.max(0.0)).sum();
            let suppress_total: f64 = records.iter().map(|r| (-r.delta).max(0.0)).sum();
            for category in Category::ALL {
                let of_cat = records.iter().filter(|r| r.category == category);
                let (boost, suppress) = of_cat.fold((0.0, 0.0), |(b, s), r| {
                    (b + r.delta.max(0.0), s + (-r.delta).max(0.0))
                });
                rows.push(CategoryMass {
                    category,
                    variant,
                    boost_mass: boost,
                    boost_fraction: (boost_total > 0.0).then(|| boost / boost_total),
                    suppress_mass: suppress,
                    suppress_fraction: (suppress_total > 0.0).then(|| suppress / suppress_total),
                });
            }
        }
        Self { rows }
    }

    pub fn boost_fraction(&self, category: Category, variant: Polarity) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.category == category && r.variant == variant)
            .and_then(|r| r.boost_fraction)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv(
            w,
            &[
                "category",
                "variant",
                "boost_mass",
                "boost_fraction",
                "suppress_mass",
                "suppress_fraction",
            ],
            self.rows.iter().map(|r| {
                vec![
                    r.category.as_str().to_string(),
                    r.variant.as_str().to_string(),
                    fmt_f64(r.boost_mass),
                    fmt_opt(r.boost_fraction),
                    fmt_f64(r.suppress_mass),
                    fmt_opt(r.suppress_fraction),
                ]
            }),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolarityComparison {
    pub positive_only: Vec<TokenRecord>,
    pub joint: Vec<TokenRecord>,
    pub negative_only: Vec<TokenRecord>,
    pub report: CategoryBoostReport,
}

/// From one checkpoint and one batch, applies positive-only, joint and
/// negative-only SGD updates independently and measures each on the full
/// batch.
pub fn polarity_comparison(policy: &Policy, batch: &RolloutBatch, eta: f64, eps: f64) -> Result<PolarityComparison> {
    if !batch.groups.iter().any(|g| {
        g.rollouts.iter().any(|r| r.advantage > 0.0) && g.rollouts.iter().any(|r| r.advantage < 0.0)
    }) {
        return Err(Error::NoMixedGroup);
    }
    let run = |polarity: Polarity| -> Result<Vec<TokenRecord>> {
        let g = grpo_gradient(policy, batch, polarity, Clip::Off)?;
        let after = policy.apply_delta(&g, eta)?;
        measure_displacement(policy, &after, batch, eps)
    };
    let positive_only = run(Polarity::PositiveOnly)?;
    let joint = run(Polarity::Joint)?;
    let negative_only = run(Polarity::NegativeOnly)?;
    let report = CategoryBoostReport::from_records(&[
        (Polarity::PositiveOnly, &positive_only),
        (Polarity::Joint, &joint),
        (Polarity::NegativeOnly, &negative_only),
    ]);
    Ok(PolarityComparison {
        positive_only,
        joint,
        negative_only,
        report,
    })
}
