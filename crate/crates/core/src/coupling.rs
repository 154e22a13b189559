//! Token-pair coupling kernels, the output-layer proxy factorization, and
//! masked-update experiments.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::displacement::token_gradients;
use crate::error::{Error, Result};
use crate::grpo::{gradient_on, Polarity, RolloutBatch, Scope, TokenRef, UpdateSpec};
use crate::numeric::{self, Mat};
use crate::policy::{Policy, PositionTrace, Token};
use crate::report::{fmt_f64, write_csv};
use crate::rng::Rng;

pub const DEFAULT_LOWCONF: f64 = 0.5;
pub const DEFAULT_MAX_SET: usize = 32;
pub const DEFAULT_MAX_PAIRS: usize = 1 << 20;

fn check_dists(dist_j: &[f64], o_j: Token, dist_k: &[f64], o_k: Token) -> Result<()> {
    if dist_j.len() != dist_k.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("distribution over {} tokens", dist_j.len()),
            got: format!("{}", dist_k.len()),
        });
    }
    for o in [o_j, o_k] {
        if o >= dist_j.len() {
            return Err(Error::TokenOutOfRange {
                id: o,
                vocab: dist_j.len(),
            });
        }
    }
    Ok(())
}

/// `φ = 1[o_j = o_k] − π_j(o_k) − π_k(o_j) + ⟨π_j, π_k⟩`, the inner product of
/// the two error vectors `e_o − π`.
pub fn phi(dist_j: &[f64], o_j: Token, dist_k: &[f64], o_k: Token) -> Result<f64> {
    check_dists(dist_j, o_j, dist_k, o_k)?;
    let same = if o_j == o_k { 1.0 } else { 0.0 };
    Ok(same - dist_j[o_k] - dist_k[o_j] + numeric::dot_unchecked(dist_j, dist_k))
}

/// Two-case form of [`phi`]: `(1 − π_j(o))(1 − π_k(o))` for identical tokens,
/// `−π_j(o_k) − π_k(o_j) + ⟨π_j, π_k⟩` otherwise. The identical-token branch
/// omits [`same_token_residual`].
pub fn phi_two_case(dist_j: &[f64], o_j: Token, dist_k: &[f64], o_k: Token) -> Result<f64> {
    check_dists(dist_j, o_j, dist_k, o_k)?;
    if o_j == o_k {
        Ok((1.0 - dist_j[o_j]) * (1.0 - dist_k[o_k]))
    } else {
        Ok(-dist_j[o_k] - dist_k[o_j] + numeric::dot_unchecked(dist_j, dist_k))
    }
}

/// `Σ_{v≠o} π_j(v) π_k(v)`: the gap between [`phi`] and the identical-token
/// branch of [`phi_two_case`].
pub fn same_token_residual(dist_j: &[f64], dist_k: &[f64], o: Token) -> Result<f64> {
    check_dists(dist_j, o, dist_k, o)?;
    Ok(dist_j
        .iter()
        .zip(dist_k)
        .enumerate()
        .filter(|&(v, _)| v != o)
        .map(|(_, (a, b))| a * b)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyTerms {
    pub h_sim: f64,
    pub phi: f64,
    pub proxy_kernel: f64,
}

/// `⟨h_j, h_k⟩ · φ_{j,k}` for two traced positions of the same policy.
pub fn proxy_kernel(pos_j: &PositionTrace, pos_k: &PositionTrace) -> Result<ProxyTerms> {
    let h_sim = numeric::dot(&pos_j.hidden, &pos_k.hidden)?;
    let phi = phi(&pos_j.probs, pos_j.token, &pos_k.probs, pos_k.token)?;
    Ok(ProxyTerms {
        h_sim,
        phi,
        proxy_kernel: h_sim * phi,
    })
}

/// The same quantity computed as the Frobenius product of the two unembedding
/// gradients `r hᵀ`.
pub fn proxy_kernel_frobenius(pos_j: &PositionTrace, pos_k: &PositionTrace) -> Result<f64> {
    let a = Mat::outer(&pos_j.error_vector(), &pos_j.hidden);
    let b = Mat::outer(&pos_k.error_vector(), &pos_k.hidden);
    numeric::frobenius_dot(&a, &b)
}

/// Forward traces of every response token in a batch, in
/// [`RolloutBatch::token_refs`] order.
#[derive(Debug, Clone)]
pub struct BatchTraces {
    pub refs: Vec<TokenRef>,
    pub positions: Vec<PositionTrace>,
    pub advantages: Vec<f64>,
}

impl BatchTraces {
    pub fn new(policy: &Policy, batch: &RolloutBatch) -> Result<Self> {
        let per_rollout = batch
            .rollout_refs()
            .into_par_iter()
            .map(|rr| -> Result<Vec<(TokenRef, PositionTrace, f64)>> {
                let ro = batch.rollout(rr);
                if ro.is_empty() {
                    return Ok(Vec::new());
                }
                let trace = policy.forward(&batch.groups[rr.group].prompt, &ro.tokens)?;
                Ok(trace
                    .positions
                    .into_iter()
                    .enumerate()
                    .map(|(pos, p)| {
                        (
                            TokenRef {
                                group: rr.group,
                                rollout: rr.rollout,
                                pos,
                            },
                            p,
                            ro.advantage,
                        )
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self {
            refs: Vec::new(),
            positions: Vec::new(),
            advantages: Vec::new(),
        };
        for (r, p, a) in per_rollout.into_iter().flatten() {
            out.refs.push(r);
            out.positions.push(p);
            out.advantages.push(a);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn index_of(&self, r: TokenRef) -> Option<usize> {
        self.refs.binary_search(&r).ok()
    }

    /// Proxy-kernel entry for a pair of token indices.
    pub fn entry(&self, j: usize, k: usize) -> Result<CouplingEntry> {
        let terms = proxy_kernel(&self.positions[j], &self.positions[k])?;
        Ok(CouplingEntry {
            j: self.refs[j],
            k: self.refs[k],
            same_token: self.positions[j].token == self.positions[k].token,
            h_sim: terms.h_sim,
            phi: terms.phi,
            proxy_kernel: terms.proxy_kernel,
            full_kernel: None,
            full_kernel_unembed: None,
            weighted: self.advantages[k] * terms.proxy_kernel,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingEntry {
    pub j: TokenRef,
    pub k: TokenRef,
    pub same_token: bool,
    pub h_sim: f64,
    pub phi: f64,
    pub proxy_kernel: f64,
    /// `⟨g_j, g_k⟩` over all parameters.
    pub full_kernel: Option<f64>,
    /// `⟨g_j, g_k⟩` restricted to the unembedding block.
    pub full_kernel_unembed: Option<f64>,
    /// `A_k · proxy_kernel`.
    pub weighted: f64,
}

/// Proxy entries plus exact full-gradient kernels for the requested pairs.
pub fn full_kernel(
    policy: &Policy,
    batch: &RolloutBatch,
    pairs: &[(TokenRef, TokenRef)],
    max_pairs: usize,
) -> Result<Vec<CouplingEntry>> {
    if pairs.len() > max_pairs {
        return Err(Error::BudgetExceeded {
            needed: pairs.len(),
            limit: max_pairs,
        });
    }
    let traces = BatchTraces::new(policy, batch)?;
    let grads = token_gradients(policy, batch, usize::MAX)?;
    let w = policy.layout().unembed_range();
    pairs
        .par_iter()
        .map(|&(a, b)| {
            let j = traces.index_of(a).ok_or(Error::PositionOutOfRange {
                pos: a.pos,
                len: traces.len(),
            })?;
            let k = traces.index_of(b).ok_or(Error::PositionOutOfRange {
                pos: b.pos,
                len: traces.len(),
            })?;
            let mut e = traces.entry(j, k)?;
            e.full_kernel = Some(numeric::dot_unchecked(&grads[j], &grads[k]));
            e.full_kernel_unembed = Some(numeric::dot_unchecked(
                &grads[j][w.clone()],
                &grads[k][w.clone()],
            ));
            Ok(e)
        })
        .collect()
}

/// Mean `|φ|` over same-token and different-token pairs `j < k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiSparsity {
    pub same_pairs: usize,
    pub diff_pairs: usize,
    pub same_mean_abs_phi: Option<f64>,
    pub diff_mean_abs_phi: Option<f64>,
}

pub fn phi_sparsity(traces: &BatchTraces) -> Result<PhiSparsity> {
    let (mut same, mut diff) = ((0usize, 0.0), (0usize, 0.0));
    for j in 0..traces.len() {
        for k in j + 1..traces.len() {
            let (pj, pk) = (&traces.positions[j], &traces.positions[k]);
            let v = phi(&pj.probs, pj.token, &pk.probs, pk.token)?.abs();
            if pj.token == pk.token {
                same.0 += 1;
                same.1 += v;
            } else {
                diff.0 += 1;
                diff.1 += v;
            }
        }
    }
    let avg = |(n, s): (usize, f64)| (n > 0).then(|| s / n as f64);
    Ok(PhiSparsity {
        same_pairs: same.0,
        diff_pairs: diff.0,
        same_mean_abs_phi: avg(same),
        diff_mean_abs_phi: avg(diff),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionRule {
    #[serde(rename = "same+lowconf")]
    SameLowConf,
    #[serde(rename = "same")]
    SameOnly,
    #[serde(rename = "lowconf")]
    LowConfOnly,
    #[serde(rename = "random")]
    Random,
}

impl SelectionRule {
    pub const ALL: [SelectionRule; 4] = [
        SelectionRule::SameLowConf,
        SelectionRule::SameOnly,
        SelectionRule::LowConfOnly,
        SelectionRule::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionRule::SameLowConf => "same+lowconf",
            SelectionRule::SameOnly => "same",
            SelectionRule::LowConfOnly => "lowconf",
            SelectionRule::Random => "random",
        }
    }
}

impl std::str::FromStr for SelectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown selection rule `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionParams {
    pub lowconf_threshold: f64,
    pub max_set: usize,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            lowconf_threshold: DEFAULT_LOWCONF,
            max_set: DEFAULT_MAX_SET,
        }
    }
}

/// Token indices (into a [`BatchTraces`]) selected for masking. `skipped` is
/// set when the rule yields nothing for this candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub members: Vec<usize>,
    pub skipped: bool,
}

fn rule_members(traces: &BatchTraces, c: usize, rule: SelectionRule, thr: f64) -> Vec<usize> {
    let cand = &traces.positions[c];
    let cand_low = cand.confidence < thr;
    (0..traces.len())
        .filter(|&k| k != c)
        .filter(|&k| {
            let p = &traces.positions[k];
            let same = p.token == cand.token;
            let low = p.confidence < thr;
            match rule {
                SelectionRule::SameLowConf => cand_low && same && low,
                SelectionRule::SameOnly => same,
                SelectionRule::LowConfOnly => cand_low && low,
                SelectionRule::Random => true,
            }
        })
        .collect()
}

fn cap_by_proxy(traces: &BatchTraces, c: usize, mut members: Vec<usize>, max_set: usize) -> Result<Vec<usize>> {
    if members.len() <= max_set {
        return Ok(members);
    }
    let mut keyed = members
        .drain(..)
        .map(|k| Ok((proxy_kernel(&traces.positions[c], &traces.positions[k])?.proxy_kernel, k)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    keyed.truncate(max_set);
    let mut out: Vec<usize> = keyed.into_iter().map(|(_, k)| k).collect();
    out.sort_unstable();
    Ok(out)
}

/// Tokens to mask for candidate `c`. The random rule draws uniformly from all
/// other tokens, matching the size of the same+lowconf set.
pub fn select_coupled_set(
    traces: &BatchTraces,
    c: usize,
    rule: SelectionRule,
    params: &SelectionParams,
    rng: &mut Rng,
) -> Result<Selection> {
    if c >= traces.len() {
        return Err(Error::PositionOutOfRange {
            pos: c,
            len: traces.len(),
        });
    }
    let thr = params.lowconf_threshold;
    let members = match rule {
        SelectionRule::Random => {
            let size = select_coupled_set(traces, c, SelectionRule::SameLowConf, params, rng)?
                .members
                .len();
            let pool = rule_members(traces, c, rule, thr);
            let mut picked: Vec<usize> = rng
                .sample_indices(pool.len(), size)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_unstable();
            picked
        }
        _ => cap_by_proxy(traces, c, rule_members(traces, c, rule, thr), params.max_set)?,
    };
    Ok(Selection {
        skipped: members.is_empty(),
        members,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingResult {
    pub candidate: TokenRef,
    pub token: Token,
    pub rule: SelectionRule,
    pub paradigm: Scope,
    pub set_size: usize,
    /// `logp_c` after the full update minus `logp_c` after the masked update.
    pub delta: f64,
    /// `Σ_{m∈M} A_m · proxy(c, m)`: the coupling removed by the mask.
    pub kernel_strength: f64,
}

/// One-step SGD masking experiments from a fixed policy and batch. The
/// unmasked update is shared by every candidate.
pub struct MaskingProbe<'a> {
    policy: &'a Policy,
    batch: &'a RolloutBatch,
    eta: f64,
    paradigm: Scope,
    unmasked: Policy,
}

impl<'a> MaskingProbe<'a> {
    pub fn new(policy: &'a Policy, batch: &'a RolloutBatch, eta: f64, paradigm: Scope) -> Result<Self> {
        let unmasked = Self::update(policy, batch, eta, paradigm, None)?;
        Ok(Self {
            policy,
            batch,
            eta,
            paradigm,
            unmasked,
        })
    }

    fn update(
        policy: &Policy,
        batch: &RolloutBatch,
        eta: f64,
        paradigm: Scope,
        masked: Option<&HashSet<TokenRef>>,
    ) -> Result<Policy> {
        let spec = UpdateSpec {
            polarity: Polarity::Joint,
            scope: paradigm,
            masked,
            ..UpdateSpec::default()
        };
        let g = gradient_on(policy, batch, &batch.rollout_refs(), &spec)?;
        policy.apply_delta(&g, eta)
    }

    fn logp(&self, policy: &Policy, c: TokenRef) -> Result<f64> {
        let ro = &self.batch.groups[c.group].rollouts[c.rollout];
        let prompt = &self.batch.groups[c.group].prompt;
        let context: Vec<Token> = prompt.iter().chain(&ro.tokens[..c.pos]).copied().collect();
        Ok(policy.trace_position(&context, ro.tokens[c.pos])?.logp)
    }

    /// `δ_M(c)`; zero exactly when `masked` is empty.
    pub fn effect(&self, c: TokenRef, masked: &HashSet<TokenRef>) -> Result<f64> {
        if masked.contains(&c) {
            return Err(Error::CandidateMasked);
        }
        if masked.is_empty() {
            return Ok(0.0);
        }
        let masked_policy = Self::update(self.policy, self.batch, self.eta, self.paradigm, Some(masked))?;
        Ok(self.logp(&self.unmasked, c)? - self.logp(&masked_policy, c)?)
    }

    pub fn paradigm(&self) -> Scope {
        self.paradigm
    }
}

/// Convenience wrapper running both updates for a single candidate.
pub fn masked_update_effect(
    policy: &Policy,
    batch: &RolloutBatch,
    candidate: TokenRef,
    masked: &HashSet<TokenRef>,
    paradigm: Scope,
    eta: f64,
) -> Result<f64> {
    if masked.contains(&candidate) {
        return Err(Error::CandidateMasked);
    }
    let full = MaskingProbe::update(policy, batch, eta, paradigm, None)?;
    let part = MaskingProbe::update(policy, batch, eta, paradigm, Some(masked))?;
    let probe = MaskingProbe {
        policy,
        batch,
        eta,
        paradigm,
        unmasked: full.clone(),
    };
    Ok(probe.logp(&full, candidate)? - probe.logp(&part, candidate)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostStats {
    pub boost_rate: f64,
    pub mean_boost: f64,
    pub n: usize,
}

pub fn boost_stats(deltas: &[f64]) -> Result<BoostStats> {
    if deltas.is_empty() {
        return Err(Error::Empty("masking results"));
    }
    let n = deltas.len();
    Ok(BoostStats {
        boost_rate: deltas.iter().filter(|&&d| d > 0.0).count() as f64 / n as f64,
        mean_boost: deltas.iter().sum::<f64>() / n as f64,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub n_candidates: usize,
    pub eta: f64,
    pub selection: SelectionParams,
    pub rules: Vec<SelectionRule>,
    pub paradigms: Vec<Scope>,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            n_candidates: 64,
            eta: crate::grpo::PROBE_LR,
            selection: SelectionParams::default(),
            rules: vec![SelectionRule::SameLowConf, SelectionRule::Random],
            paradigms: vec![Scope::UnembedOnly, Scope::Full],
        }
    }
}

/// Candidate token indices: tokens of positive-advantage rollouts that have
/// at least one same+lowconf partner.
pub fn eligible_candidates(traces: &BatchTraces, params: &SelectionParams) -> Vec<usize> {
    (0..traces.len())
        .filter(|&c| traces.advantages[c] > 0.0)
        .filter(|&c| {
            !rule_members(traces, c, SelectionRule::SameLowConf, params.lowconf_threshold).is_empty()
        })
        .collect()
}

/// Samples candidates and measures `δ` for every (rule, paradigm) pair.
/// Results are ordered by candidate, then rule, then paradigm.
pub fn run_masking_probe(
    policy: &Policy,
    batch: &RolloutBatch,
    config: &MaskingConfig,
    rng: &Rng,
) -> Result<Vec<MaskingResult>> {
    let traces = BatchTraces::new(policy, batch)?;
    let eligible = eligible_candidates(&traces, &config.selection);
    let mut chosen: Vec<usize> = rng
        .split("candidates")
        .sample_indices(eligible.len(), config.n_candidates)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    let probes = config
        .paradigms
        .iter()
        .map(|&p| MaskingProbe::new(policy, batch, config.eta, p))
        .collect::<Result<Vec<_>>>()?;
    let per_candidate = chosen
        .par_iter()
        .map(|&c| -> Result<Vec<MaskingResult>> {
            let mut out = Vec::new();
            for &rule in &config.rules {
                let mut sub = rng.split("selection").split_index(c as u64);
                let sel = select_coupled_set(&traces, c, rule, &config.selection, &mut sub)?;
                if sel.skipped {
                    continue;
                }
                let masked: HashSet<TokenRef> = sel.members.iter().map(|&k| traces.refs[k]).collect();
                let strength = sel
                    .members
                    .iter()
                    .map(|&k| Ok(traces.advantages[k] * proxy_kernel(&traces.positions[c], &traces.positions[k])?.proxy_kernel))
                    .sum::<Result<f64>>()?;
                for probe in &probes {
                    out.push(MaskingResult {
                        candidate: traces.refs[c],
                        token: traces.positions[c].token,
                        rule,
                        paradigm: probe.paradigm(),
                        set_size: masked.len(),
                        delta: probe.effect(traces.refs[c], &masked)?,
                        kernel_strength: strength,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_candidate.into_iter().flatten().collect())
}

/// Boost rate per quantile bucket of ascending `kernel_strength`.
pub fn strength_quantile_boost_rates(results: &[MaskingResult], buckets: usize) -> Vec<BoostStats> {
    let mut sorted: Vec<&MaskingResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.kernel_strength.total_cmp(&b.kernel_strength));
    let n = sorted.len();
    (0..buckets)
        .filter_map(|b| {
            let (lo, hi) = (b * n / buckets, (b + 1) * n / buckets);
            let deltas: Vec<f64> = sorted[lo..hi].iter().map(|r| r.delta).collect();
            boost_stats(&deltas).ok()
        })
        .collect()
}

pub fn write_masking_csv<W: Write>(w: W, results: &[MaskingResult]) -> Result<()> {
    write_csv(
        w,
        &[
            "candidate_group",
            "candidate_rollout",
            "candidate_pos",
            "token_id",
            "rule",
            "paradigm",
            "set_size",
            "delta",
            "kernel_strength",
        ],
        results.iter().map(|r| {
            vec![
                r.candidate.group.to_string(),
                r.candidate.rollout.to_string(),
                r.candidate.pos.to_string(),
                r.token.to_string(),
                r.rule.as_str().to_string(),
                r.paradigm.as_str().to_string(),
                r.set_size.to_string(),
                fmt_f64(r.delta),
                fmt_f64(r.kernel_strength),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingSummary {
    pub rule: SelectionRule,
    pub paradigm: Scope,
    pub boost_rate: f64,
    pub mean_boost: f64,
    pub n: usize,
}

/// One summary per (rule, paradigm) pair present in `results`.
pub fn summarize_masking(results: &[MaskingResult]) -> Vec<MaskingSummary> {
    let mut keys: Vec<(SelectionRule, Scope)> = Vec::new();
    for r in results {
        if !keys.contains(&(r.rule, r.paradigm)) {
            keys.push((r.rule, r.paradigm));
        }
    }
    keys.into_iter()
        .filter_map(|(rule, paradigm)| {
            let deltas: Vec<f64> = results
                .iter()
                .filter(|r| r.rule == rule && r.paradigm == paradigm)
                .map(|r| r.delta)
                .collect();
            boost_stats(&deltas).ok().map(|s| MaskingSummary {
                rule,
                paradigm,
                boost_rate: s.boost_rate,
                mean_boost: s.mean_boost,
                n: s.n,
            })
        })
        .collect()
}
