//! Rollout sampling, group-normalized advantages, the token-level GRPO
//! objective and its gradient, and the SGD / Adam optimizers.
//!
//! Sign convention: every update is gradient *ascent* on
//! `J(θ) = (1/N) Σ_i Σ_t A_i log π_θ(o_{i,t} | q, o_{i,<t})`, with `N` the
//! number of response tokens in the (mini-)batch being updated.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::policy::{Policy, Token};
use crate::rng::Rng;
use crate::task::{TaskInstance, Verifier, EOS};

/// Population-std floor used when normalizing rewards.
pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_GROUP_SIZE: usize = 8;
pub const PROBE_LR: f64 = 1e-1;
pub const TRAIN_LR: f64 = 1e-2;
pub const CLIP_LOW: f64 = 0.2;
pub const CLIP_HIGH: f64 = 0.28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query_id: usize,
    pub tokens: Vec<Token>,
    pub logp_old: Vec<f64>,
    pub reward: f64,
    pub advantage: f64,
    /// Hit the length cap before emitting EOS.
    pub truncated: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sign(&self) -> Sign {
        Sign::of(self.advantage)
    }
}

/// Sign of a rollout's advantage; zero advantages are neutral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
    Neutral,
}

impl Sign {
    pub fn of(a: f64) -> Self {
        if a > 0.0 {
            Sign::Positive
        } else if a < 0.0 {
            Sign::Negative
        } else {
            Sign::Neutral
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Positive => "positive",
            Sign::Negative => "negative",
            Sign::Neutral => "neutral",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroup {
    pub query_id: usize,
    pub instance: TaskInstance,
    pub prompt: Vec<Token>,
    pub rollouts: Vec<Rollout>,
    /// All rewards equal; advantages are zero.
    pub degenerate: bool,
}

impl QueryGroup {
    pub fn is_mixed(&self) -> bool {
        !self.degenerate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RolloutRef {
    pub group: usize,
    pub rollout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenRef {
    pub group: usize,
    pub rollout: usize,
    pub pos: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub groups: Vec<QueryGroup>,
}

impl RolloutBatch {
    pub fn new(groups: Vec<QueryGroup>) -> Self {
        Self { groups }
    }

    /// `N = Σ_i |o_i|`.
    pub fn token_count(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .map(Rollout::len)
            .sum()
    }

    pub fn rollout_count(&self) -> usize {
        self.groups.iter().map(|g| g.rollouts.len()).sum()
    }

    pub fn rollout(&self, r: RolloutRef) -> &Rollout {
        &self.groups[r.group].rollouts[r.rollout]
    }

    pub fn rollout_refs(&self) -> Vec<RolloutRef> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, grp)| {
                (0..grp.rollouts.len()).map(move |r| RolloutRef { group: g, rollout: r })
            })
            .collect()
    }

    /// Every response token, ordered by (group, rollout, position).
    pub fn token_refs(&self) -> Vec<TokenRef> {
        let mut out = Vec::with_capacity(self.token_count());
        for (g, grp) in self.groups.iter().enumerate() {
            for (r, ro) in grp.rollouts.iter().enumerate() {
                out.extend((0..ro.len()).map(|pos| TokenRef {
                    group: g,
                    rollout: r,
                    pos,
                }));
            }
        }
        out
    }

    pub fn has_mixed_group(&self) -> bool {
        self.groups.iter().any(QueryGroup::is_mixed)
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.rollout_count();
        if n == 0 {
            return 0.0;
        }
        self.groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .map(|r| r.reward)
            .sum::<f64>()
            / n as f64
    }

    /// One JSON object per rollout: `{query_id, tokens, logp_old, reward, advantage}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            query_id: usize,
            tokens: &'a [Token],
            logp_old: &'a [f64],
            reward: f64,
            advantage: f64,
        }
        for r in self.groups.iter().flat_map(|g| &g.rollouts) {
            serde_json::to_writer(
                &mut w,
                &Line {
                    query_id: r.query_id,
                    tokens: &r.tokens,
                    logp_old: &r.logp_old,
                    reward: r.reward,
                    advantage: r.advantage,
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Sample { temperature: f64 },
    /// Zero-temperature limit: always the argmax token.
    Greedy,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding::Sample { temperature: 1.0 }
    }
}

impl Decoding {
    fn validate(self) -> Result<()> {
        match self {
            Decoding::Sample { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::InvalidConfig(format!(
                    "temperature must be > 0, got {temperature}"
                )))
            }
            _ => Ok(()),
        }
    }

    fn choose(self, logits: &[f64], rng: &mut Rng) -> Result<Token> {
        match self {
            Decoding::Greedy => Ok(argmax(logits)),
            Decoding::Sample { temperature } => {
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                let probs = numeric::softmax(&scaled)?;
                Ok(rng.categorical(&probs))
            }
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Continues `prefix` after `prompt` until EOS or until the response reaches
/// `max_len` tokens. Returns only the newly generated tokens and their
/// log-probabilities under the (temperature-1) policy.
pub fn continue_response(
    policy: &Policy,
    prompt: &[Token],
    prefix: &[Token],
    decoding: Decoding,
    max_len: usize,
    rng: &mut Rng,
) -> Result<(Vec<Token>, Vec<f64>)> {
    decoding.validate()?;
    let mut seq: Vec<Token> = prompt.iter().chain(prefix).copied().collect();
    let mut tokens = Vec::new();
    let mut logps = Vec::new();
    if prefix.last() == Some(&EOS) {
        return Ok((tokens, logps));
    }
    while prefix.len() + tokens.len() < max_len {
        let logits = policy.next_logits(&seq);
        let tok = decoding.choose(&logits, rng)?;
        let lp = logits[tok] - numeric::log_sum_exp(&logits);
        tokens.push(tok);
        logps.push(lp);
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok((tokens, logps))
}

/// Samples `g` responses for one prompt and verifies them. Advantages are
/// left at zero; see [`normalize_advantages`].
pub fn sample_group(
    policy: &Policy,
    instance: &TaskInstance,
    query_id: usize,
    g: usize,
    decoding: Decoding,
    max_len: usize,
    rng: &Rng,
) -> Result<QueryGroup> {
    if g == 0 {
        return Err(Error::InvalidConfig("group size must be >= 1".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be >= 1".into()));
    }
    let prompt = instance.prompt();
    let verifier = Verifier::new(instance.kind);
    let rollouts = (0..g)
        .map(|i| {
            let mut r = rng.split_index(i as u64);
            let (tokens, logp_old) = continue_response(policy, &prompt, &[], decoding, max_len, &mut r)?;
            let truncated = tokens.last() != Some(&EOS);
            Ok(Rollout {
                query_id,
                reward: verifier.verify(instance, &tokens),
                tokens,
                logp_old,
                advantage: 0.0,
                truncated,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryGroup {
        query_id,
        instance: instance.clone(),
        prompt,
        rollouts,
        degenerate: false,
    })
}

/// `Â_i = (r_i − mean) / max(std, 1e-8)` with the population std. Groups
/// whose rewards are all equal get zero advantages and are flagged degenerate.
pub fn normalize_advantages(group: &mut QueryGroup) {
    let rewards: Vec<f64> = group.rollouts.iter().map(|r| r.reward).collect();
    let (mean, std) = mean_std(&rewards);
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    for r in &mut group.rollouts {
        r.advantage = if degenerate {
            0.0
        } else {
            (r.reward - mean) / std.max(STD_FLOOR)
        };
    }
    group.degenerate = degenerate;
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingConfig {
    pub group_size: usize,
    pub decoding: Decoding,
    pub max_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            decoding: Decoding::default(),
            max_len: 6,
        }
    }
}

/// Samples, verifies and normalizes one group per task. Groups are sampled in
/// parallel from per-query substreams, so results do not depend on threading.
pub fn sample_batch(
    policy: &Policy,
    tasks: &[TaskInstance],
    query_ids: &[usize],
    sampling: &SamplingConfig,
    rng: &Rng,
) -> Result<RolloutBatch> {
    debug_assert_eq!(tasks.len(), query_ids.len());
    let groups = tasks
        .par_iter()
        .zip(query_ids.par_iter())
        .enumerate()
        .map(|(slot, (task, &qid))| {
            let mut grp = sample_group(
                policy,
                task,
                qid,
                sampling.group_size,
                sampling.decoding,
                sampling.max_len,
                &rng.split_index(slot as u64),
            )?;
            normalize_advantages(&mut grp);
            Ok(grp)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch::new(groups))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    Joint,
    PositiveOnly,
    NegativeOnly,
}

impl Polarity {
    /// Update weight `A_i` for a rollout under this polarity.
    pub fn weight(self, r: &Rollout) -> f64 {
        match self {
            Polarity::Joint => r.advantage,
            Polarity::PositiveOnly if r.reward == 1.0 => r.advantage,
            Polarity::NegativeOnly if r.reward == 0.0 => r.advantage,
            _ => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Joint => "joint",
            Polarity::PositiveOnly => "positive_only",
            Polarity::NegativeOnly => "negative_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Clip {
    #[default]
    Off,
    On { low: f64, high: f64 },
}

impl Clip {
    pub fn standard() -> Self {
        Clip::On {
            low: CLIP_LOW,
            high: CLIP_HIGH,
        }
    }

    /// Multiplier on `A·g` for one token: `ρ` unless the PPO rule clips it, then 0.
    fn factor(self, ratio: f64, weight: f64) -> f64 {
        match self {
            Clip::Off => 1.0,
            Clip::On { low, high } => {
                if (weight > 0.0 && ratio > 1.0 + high) || (weight < 0.0 && ratio < 1.0 - low) {
                    0.0
                } else {
                    ratio
                }
            }
        }
    }
}

/// Which parameters an update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Full,
    /// Only the unembedding matrix `W`.
    UnembedOnly,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Full => "full",
            Scope::UnembedOnly => "unembed_only",
        }
    }
}

/// Everything that shapes one gradient evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateSpec<'a> {
    pub polarity: Polarity,
    pub clip: Clip,
    pub scope: Scope,
    /// Tokens whose loss terms are zeroed. `N` is unchanged by masking.
    pub masked: Option<&'a HashSet<TokenRef>>,
}

/// `(1/N) Σ_i Σ_t A_i g_{i,t}` over the selected rollouts.
pub fn gradient_on(
    policy: &Policy,
    batch: &RolloutBatch,
    selection: &[RolloutRef],
    spec: &UpdateSpec<'_>,
) -> Result<Vec<f64>> {
    if selection.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n_tokens: usize = selection.iter().map(|&r| batch.rollout(r).len()).sum();
    let mut grad = vec![0.0; policy.param_count()];
    if n_tokens == 0 {
        return Ok(grad);
    }
    let partials = selection
        .par_iter()
        .map(|&rr| -> Result<Option<Vec<f64>>> {
            let ro = batch.rollout(rr);
            let weight = spec.polarity.weight(ro);
            if weight == 0.0 || ro.is_empty() {
                return Ok(None);
            }
            let prompt = &batch.groups[rr.group].prompt;
            let trace = policy.forward(prompt, &ro.tokens)?;
            let mut g = vec![0.0; policy.param_count()];
            for (t, pos) in trace.positions.iter().enumerate() {
                if let Some(m) = spec.masked {
                    if m.contains(&TokenRef {
                        group: rr.group,
                        rollout: rr.rollout,
                        pos: t,
                    }) {
                        continue;
                    }
                }
                let ratio = (pos.logp - ro.logp_old[t]).exp();
                let w = weight * spec.clip.factor(ratio, weight);
                if w == 0.0 {
                    continue;
                }
                match spec.scope {
                    Scope::Full => policy.accumulate_score_grad(pos, w, &mut g),
                    Scope::UnembedOnly => policy.accumulate_unembed_grad(pos, w, &mut g),
                }
            }
            Ok(Some(g))
        })
        .collect::<Result<Vec<_>>>()?;
    for g in partials.into_iter().flatten() {
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let inv = 1.0 / n_tokens as f64;
    for v in &mut grad {
        *v *= inv;
    }
    Ok(grad)
}

/// Gradient of the simplified GRPO objective over the whole batch.
pub fn grpo_gradient(
    policy: &Policy,
    batch: &RolloutBatch,
    polarity: Polarity,
    clip: Clip,
) -> Result<Vec<f64>> {
    gradient_on(
        policy,
        batch,
        &batch.rollout_refs(),
        &UpdateSpec {
            polarity,
            clip,
            ..UpdateSpec::default()
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn adam(lr: f64, param_count: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            ..Self::sgd(lr)
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One ascent step. Nothing is modified when the gradient is non-finite
    /// or mis-shaped.
    pub fn step(&mut self, policy: &Policy, grad: &[f64]) -> Result<Policy> {
        if grad.len() != policy.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("gradient of length {}", policy.param_count()),
                got: format!("{}", grad.len()),
            });
        }
        numeric::ensure_finite(grad, "gradient")?;
        match self.kind {
            OptimizerKind::Sgd => {
                let next = policy.apply_delta(grad, self.lr)?;
                self.steps += 1;
                Ok(next)
            }
            OptimizerKind::Adam => {
                if self.m.len() != grad.len() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("moments of length {}", grad.len()),
                        got: format!("{}", self.m.len()),
                    });
                }
                let t = self.steps + 1;
                let bc1 = 1.0 - self.beta1.powi(t as i32);
                let bc2 = 1.0 - self.beta2.powi(t as i32);
                let mut m = self.m.clone();
                let mut v = self.v.clone();
                let mut update = vec![0.0; grad.len()];
                for i in 0..grad.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    update[i] = m_hat / (v_hat.sqrt() + self.eps);
                }
                let next = policy.apply_delta(&update, self.lr)?;
                self.m = m;
                self.v = v;
                self.steps = t;
                Ok(next)
            }
        }
    }
}
