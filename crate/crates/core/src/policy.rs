//! Tiny autoregressive policy: a fixed-window concatenation MLP.
//!
//! For a prefix `s`, the last `K` tokens (left-padded with [`BOS`]) are
//! embedded, offset by per-slot position embeddings, concatenated into a
//! `K·d_e` vector `x`, and mapped to the hidden state
//! `h = tanh(xᵀ M + b)`. Logits are `z = W h` with `W` the `V×d` unembedding.
//!
//! Parameters live in one flat vector in the canonical order
//! `embed (V×d_e), pos_embed (K×d_e), mix_weight (K·d_e×d), mix_bias (d),
//! unembed (V×d)`, all row-major. Flat-vector indices are stable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, Mat};
use crate::rng::Rng;

pub type Token = usize;

/// Padding token for prefixes shorter than the context window.
pub const BOS: Token = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub param_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            embed_dim: 16,
            hidden_dim: 32,
            context_window: 8,
            param_init_scale: 0.08,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig(format!(
                "model.vocab_size must be >= 4, got {}",
                self.vocab_size
            )));
        }
        if self.context_window < 2 {
            return Err(Error::InvalidConfig(format!(
                "model.context_window must be >= 2, got {}",
                self.context_window
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        if !(self.param_init_scale.is_finite() && self.param_init_scale >= 0.0) {
            return Err(Error::InvalidConfig(
                "model.param_init_scale must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub embed: usize,
    pub pos_embed: usize,
    pub mix_weight: usize,
    pub mix_bias: usize,
    pub unembed: usize,
    pub total: usize,
}

impl ParamLayout {
    fn new(c: &ModelConfig) -> Self {
        let embed = 0;
        let pos_embed = embed + c.vocab_size * c.embed_dim;
        let mix_weight = pos_embed + c.context_window * c.embed_dim;
        let mix_bias = mix_weight + c.context_window * c.embed_dim * c.hidden_dim;
        let unembed = mix_bias + c.hidden_dim;
        let total = unembed + c.vocab_size * c.hidden_dim;
        Self {
            embed,
            pos_embed,
            mix_weight,
            mix_bias,
            unembed,
            total,
        }
    }

    pub fn unembed_range(&self) -> std::ops::Range<usize> {
        self.unembed..self.total
    }
}

/// Everything computed at one response position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTrace {
    /// The `K` tokens the hidden state was computed from, oldest first.
    pub window: Vec<Token>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub logprobs: Vec<f64>,
    pub probs: Vec<f64>,
    pub token: Token,
    pub logp: f64,
    pub entropy: f64,
    pub confidence: f64,
}

impl PositionTrace {
    /// Error vector `r = e_o − π`.
    pub fn error_vector(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        r[self.token] += 1.0;
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub positions: Vec<PositionTrace>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, t: usize) -> Result<&PositionTrace> {
        self.positions.get(t).ok_or(Error::PositionOutOfRange {
            pos: t,
            len: self.positions.len(),
        })
    }

    pub fn logps(&self) -> Vec<f64> {
        self.positions.iter().map(|p| p.logp).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl Policy {
    /// Uniform `(−scale, +scale)` initialization of every parameter.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let s = config.param_init_scale;
        let params = (0..layout.total).map(|_| rng.uniform_range(-s, s)).collect();
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", layout.total),
                got: format!("{}", params.len()),
            });
        }
        numeric::ensure_finite(&params, "parameters")?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Unembedding matrix `W` (V×d).
    pub fn unembed(&self) -> Mat {
        Mat::from_vec(
            self.config.vocab_size,
            self.config.hidden_dim,
            self.params[self.layout.unembed_range()].to_vec(),
        )
        .expect("layout is consistent")
    }

    /// `θ' = θ + scale · delta`, leaving `self` untouched.
    pub fn apply_delta(&self, delta: &[f64], scale: f64) -> Result<Policy> {
        if delta.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("delta of length {}", self.params.len()),
                got: format!("{}", delta.len()),
            });
        }
        let params: Vec<f64> = self
            .params
            .iter()
            .zip(delta)
            .map(|(p, d)| p + scale * d)
            .collect();
        numeric::ensure_finite(&params, "updated parameters")?;
        Ok(Policy {
            config: self.config,
            layout: self.layout,
            params,
        })
    }

    fn check_token(&self, t: Token) -> Result<()> {
        if t >= self.config.vocab_size {
            Err(Error::TokenOutOfRange {
                id: t,
                vocab: self.config.vocab_size,
            })
        } else {
            Ok(())
        }
    }

    /// Last `K` tokens of `context`, left-padded with BOS.
    pub fn window(&self, context: &[Token]) -> Vec<Token> {
        let k = self.config.context_window;
        let mut w = vec![BOS; k.saturating_sub(context.len())];
        w.extend_from_slice(&context[context.len().saturating_sub(k)..]);
        w
    }

    fn input_vector(&self, window: &[Token]) -> Vec<f64> {
        let de = self.config.embed_dim;
        let mut x = Vec::with_capacity(window.len() * de);
        for (slot, &tok) in window.iter().enumerate() {
            let e = &self.params[self.layout.embed + tok * de..][..de];
            let p = &self.params[self.layout.pos_embed + slot * de..][..de];
            x.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        x
    }

    fn hidden_from_window(&self, window: &[Token]) -> Vec<f64> {
        let d = self.config.hidden_dim;
        let x = self.input_vector(window);
        let mut a = self.params[self.layout.mix_bias..][..d].to_vec();
        let mix = &self.params[self.layout.mix_weight..];
        for (row, &xa) in x.iter().enumerate() {
            if xa == 0.0 {
                continue;
            }
            for (aj, m) in a.iter_mut().zip(&mix[row * d..(row + 1) * d]) {
                *aj += xa * m;
            }
        }
        a.iter().map(|v| v.tanh()).collect()
    }

    fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let d = self.config.hidden_dim;
        let w = &self.params[self.layout.unembed_range()];
        (0..self.config.vocab_size)
            .map(|v| numeric::dot_unchecked(&w[v * d..(v + 1) * d], h))
            .collect()
    }

    /// Next-token logits after `context` (no validation; ids must be in range).
    pub fn next_logits(&self, context: &[Token]) -> Vec<f64> {
        let window = self.window(context);
        let h = self.hidden_from_window(&window);
        self.logits_from_hidden(&h)
    }

    /// Full trace for emitting `token` after `context`.
    pub fn trace_position(&self, context: &[Token], token: Token) -> Result<PositionTrace> {
        self.check_token(token)?;
        for &t in context {
            self.check_token(t)?;
        }
        let window = self.window(context);
        let hidden = self.hidden_from_window(&window);
        let logits = self.logits_from_hidden(&hidden);
        let logprobs = numeric::log_softmax(&logits)?;
        let probs: Vec<f64> = logprobs.iter().map(|l| l.exp()).collect();
        let entropy = -probs
            .iter()
            .zip(&logprobs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * l)
            .sum::<f64>();
        Ok(PositionTrace {
            window,
            logp: logprobs[token],
            confidence: probs[token],
            hidden,
            logits,
            logprobs,
            probs,
            token,
            entropy,
        })
    }

    /// Forward pass over every response position.
    pub fn forward(&self, prompt: &[Token], response: &[Token]) -> Result<ForwardTrace> {
        if response.is_empty() {
            return Err(Error::Empty("response"));
        }
        let mut seq = Vec::with_capacity(prompt.len() + response.len());
        seq.extend_from_slice(prompt);
        let mut positions = Vec::with_capacity(response.len());
        for &tok in response {
            positions.push(self.trace_position(&seq, tok)?);
            seq.push(tok);
        }
        Ok(ForwardTrace { positions })
    }

    /// Log-probabilities of each response token, without building full traces.
    pub fn response_logps(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        Ok(self.forward(prompt, response)?.logps())
    }

    /// Adds `weight · ∇θ log π(o_t | s_t)` into `grad` (flat, canonical order).
    pub fn accumulate_score_grad(&self, pos: &PositionTrace, weight: f64, grad: &mut [f64]) {
        self.backprop(pos, weight, grad, false);
    }

    /// As [`Policy::accumulate_score_grad`] but only touching the unembedding block.
    pub fn accumulate_unembed_grad(&self, pos: &PositionTrace, weight: f64, grad: &mut [f64]) {
        self.backprop(pos, weight, grad, true);
    }

    fn backprop(&self, pos: &PositionTrace, weight: f64, grad: &mut [f64], unembed_only: bool) {
        let c = &self.config;
        let (v_size, d, de) = (c.vocab_size, c.hidden_dim, c.embed_dim);
        let r = pos.error_vector();
        let h = &pos.hidden;

        let gw = &mut grad[self.layout.unembed_range()];
        for v in 0..v_size {
            let coef = weight * r[v];
            if coef == 0.0 {
                continue;
            }
            for (g, hj) in gw[v * d..(v + 1) * d].iter_mut().zip(h) {
                *g += coef * hj;
            }
        }
        if unembed_only {
            return;
        }

        // dh = Wᵀ r, then through tanh.
        let w = &self.params[self.layout.unembed_range()];
        let mut da = vec![0.0; d];
        for v in 0..v_size {
            if r[v] == 0.0 {
                continue;
            }
            for (acc, wv) in da.iter_mut().zip(&w[v * d..(v + 1) * d]) {
                *acc += r[v] * wv;
            }
        }
        for (g, hj) in da.iter_mut().zip(h) {
            *g *= 1.0 - hj * hj;
        }

        for (g, a) in grad[self.layout.mix_bias..][..d].iter_mut().zip(&da) {
            *g += weight * a;
        }

        let x = self.input_vector(&pos.window);
        let mix = &self.params[self.layout.mix_weight..][..x.len() * d];
        let mut dx = vec![0.0; x.len()];
        {
            let gmix = &mut grad[self.layout.mix_weight..][..x.len() * d];
            for (row, (&xa, dxa)) in x.iter().zip(dx.iter_mut()).enumerate() {
                let wxa = weight * xa;
                let grow = &mut gmix[row * d..(row + 1) * d];
                for (g, a) in grow.iter_mut().zip(&da) {
                    *g += wxa * a;
                }
                *dxa = numeric::dot_unchecked(&mix[row * d..(row + 1) * d], &da);
            }
        }

        for (slot, &tok) in pos.window.iter().enumerate() {
            let dxs = &dx[slot * de..(slot + 1) * de];
            let ge = &mut grad[self.layout.embed + tok * de..][..de];
            for (g, v) in ge.iter_mut().zip(dxs) {
                *g += weight * v;
            }
            let gp = &mut grad[self.layout.pos_embed + slot * de..][..de];
            for (g, v) in gp.iter_mut().zip(dxs) {
                *g += weight * v;
            }
        }
    }

    /// Exact `∇θ log π(o_t | s_t)` as one flat vector.
    pub fn score_grad_full(&self, trace: &ForwardTrace, t: usize) -> Result<Vec<f64>> {
        let pos = trace.position(t)?;
        let mut g = vec![0.0; self.param_count()];
        self.accumulate_score_grad(pos, 1.0, &mut g);
        Ok(g)
    }

    /// `∇W log π(o_t | s_t) = (e_o − π) h_tᵀ`.
    pub fn score_grad_unembed(&self, trace: &ForwardTrace, t: usize) -> Result<Mat> {
        let pos = trace.position(t)?;
        Ok(Mat::outer(&pos.error_vector(), &pos.hidden))
    }
}
