//! Supervised warm start that gives probes a base policy with mid-range
//! success rates.
//!
//! A randomly initialized policy almost never emits the `ANS d EOS` shape, so
//! every group is degenerate. The warm start maximizes the likelihood of
//! canonical responses whose answer digit is replaced by a uniformly random
//! digit with probability `1 − label_accuracy`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::Optimizer;
use crate::policy::{ModelConfig, Policy, Token};
use crate::rng::Rng;
use crate::task::{digit_token, sample_task, TaskKind, TaskSuite, ANS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub label_accuracy: f64,
    pub kinds: Vec<TaskKind>,
    pub min_operands: usize,
    pub max_operands: usize,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            lr: 1e-3,
            label_accuracy: 0.9,
            kinds: TaskKind::ALL.to_vec(),
            min_operands: 2,
            max_operands: 3,
        }
    }
}

impl WarmStartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("warm_start.batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("warm_start.lr must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.label_accuracy) {
            return Err(Error::InvalidConfig(
                "warm_start.label_accuracy must lie in [0, 1]".into(),
            ));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidConfig("warm_start.kinds must not be empty".into()));
        }
        if self.min_operands < 2 || self.max_operands > 5 || self.min_operands > self.max_operands {
            return Err(Error::InvalidConfig(
                "warm_start operand range must satisfy 2 <= min <= max <= 5".into(),
            ));
        }
        Ok(())
    }
}

/// Initializes a policy from `rng` and runs the supervised warm start with Adam.
pub fn warm_start(model: ModelConfig, config: &WarmStartConfig, rng: &Rng) -> Result<Policy> {
    config.validate()?;
    let mut policy = Policy::init(model, &mut rng.split("init"))?;
    let mut opt = Optimizer::adam(config.lr, policy.param_count());
    let mut data = rng.split("data");
    for _ in 0..config.steps {
        let examples = (0..config.batch_size)
            .map(|_| {
                let kind = config.kinds[data.below(config.kinds.len())];
                let span = config.max_operands - config.min_operands + 1;
                let difficulty = config.min_operands + data.below(span);
                let task = sample_task(&mut data, kind, difficulty)?;
                let digit = if data.uniform() < config.label_accuracy {
                    task.expected[0]
                } else {
                    data.below(10) as u8
                };
                Ok((task.prompt(), vec![ANS, digit_token(digit), EOS]))
            })
            .collect::<Result<Vec<_>>>()?;
        let grad = likelihood_gradient(&policy, &examples)?;
        policy = opt.step(&policy, &grad)?;
    }
    Ok(policy)
}

/// Gradient of the mean per-token log-likelihood of `(prompt, response)` pairs.
pub fn likelihood_gradient(policy: &Policy, examples: &[(Vec<Token>, Vec<Token>)]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.param_count()];
    let mut n = 0usize;
    for (prompt, response) in examples {
        let trace = policy.forward(prompt, response)?;
        for pos in &trace.positions {
            policy.accumulate_score_grad(pos, 1.0, &mut grad);
        }
        n += trace.len();
    }
    if n == 0 {
        return Err(Error::Empty("warm-start examples"));
    }
    for g in &mut grad {
        *g /= n as f64;
    }
    Ok(grad)
}

/// Fraction of suite tasks answered correctly under greedy decoding.
pub fn greedy_accuracy(policy: &Policy, suite: &TaskSuite, max_len: usize) -> Result<f64> {
    if suite.is_empty() {
        return Err(Error::Empty("task suite"));
    }
    let mut rng = Rng::new(0);
    let mut correct = 0.0;
    for task in &suite.tasks {
        let (tokens, _) = crate::grpo::continue_response(
            policy,
            &task.prompt(),
            &[],
            crate::grpo::Decoding::Greedy,
            max_len,
            &mut rng,
        )?;
        correct += crate::task::verify(task, &tokens);
    }
    Ok(correct / suite.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{SuiteSpec, TaskInstance};

    #[test]
    fn warm_start_learns_the_answer_shape() {
        let p = warm_start(ModelConfig::default(), &WarmStartConfig::default(), &Rng::new(0)).unwrap();
        let task = TaskInstance::new(TaskKind::Max, vec![1, 8]).unwrap();
        let (tokens, _) = crate::grpo::continue_response(
            &p,
            &task.prompt(),
            &[],
            crate::grpo::Decoding::Greedy,
            6,
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(tokens.len(), 3);
        assert_eq!(tokens[0], ANS);
        assert_eq!(tokens[2], EOS);
        let suite = TaskSuite::generate(&SuiteSpec::default(), &mut Rng::new(1)).unwrap();
        let acc = greedy_accuracy(&p, &suite, 6).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn warm_start_is_deterministic_and_validated() {
        let config = WarmStartConfig {
            steps: 3,
            ..WarmStartConfig::default()
        };
        let a = warm_start(ModelConfig::default(), &config, &Rng::new(4)).unwrap();
        let b = warm_start(ModelConfig::default(), &config, &Rng::new(4)).unwrap();
        assert_eq!(a, b);
        let bad = WarmStartConfig {
            label_accuracy: 1.5,
            ..config
        };
        assert!(warm_start(ModelConfig::default(), &bad, &Rng::new(4)).is_err());
    }
}
