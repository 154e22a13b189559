//! Synthetic verifiable arithmetic tasks with binary rewards.
//!
//! Prompts are `[OP, d₁, …, dₙ, SEP]`; the only rewarded response is
//! `[ANS, answer digits…, EOS]`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Token;
use crate::rng::Rng;

pub use crate::policy::BOS;
pub const EOS: Token = 1;
pub const ANS: Token = 2;
pub const SEP: Token = 3;
pub const DIGIT0: Token = 4;
pub const OP_SUM: Token = 14;
pub const OP_MAX: Token = 15;
pub const OP_PAR: Token = 16;
/// Smallest vocabulary holding every named token.
pub const MIN_VOCAB: usize = 17;

pub const MIN_OPERANDS: usize = 2;
pub const MAX_OPERANDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Template,
    Content,
    Operator,
    Special,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Template,
        Category::Content,
        Category::Operator,
        Category::Special,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Template => "template",
            Category::Content => "content",
            Category::Operator => "operator",
            Category::Special => "special",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token ids and their categories. Ids above the operators are formatting
/// fillers and count as template tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    size: usize,
}

impl TokenVocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(Error::InvalidConfig(format!(
                "task vocabulary needs at least {MIN_VOCAB} tokens, model has {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn category(&self, token: Token) -> Result<Category> {
        match token {
            BOS | EOS | SEP => Ok(Category::Special),
            ANS => Ok(Category::Template),
            t if (DIGIT0..DIGIT0 + 10).contains(&t) => Ok(Category::Content),
            OP_SUM | OP_MAX | OP_PAR => Ok(Category::Operator),
            t if t < self.size => Ok(Category::Template),
            t => Err(Error::TokenOutOfRange {
                id: t,
                vocab: self.size,
            }),
        }
    }
}

pub fn digit_token(d: u8) -> Token {
    DIGIT0 + d as Token
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Sum of operands modulo 10.
    Sum,
    /// Largest operand.
    Max,
    /// Parity of the operand sum (1 = odd).
    Parity,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Sum, TaskKind::Max, TaskKind::Parity];

    pub fn operator(self) -> Token {
        match self {
            TaskKind::Sum => OP_SUM,
            TaskKind::Max => OP_MAX,
            TaskKind::Parity => OP_PAR,
        }
    }

    pub fn answer(self, operands: &[u8]) -> Vec<u8> {
        let sum: u32 = operands.iter().map(|&d| u32::from(d)).sum();
        match self {
            TaskKind::Sum => vec![(sum % 10) as u8],
            TaskKind::Max => vec![operands.iter().copied().max().unwrap_or(0)],
            TaskKind::Parity => vec![(sum % 2) as u8],
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" | "sum-mod-10" => Ok(TaskKind::Sum),
            "max" | "max-of-list" => Ok(TaskKind::Max),
            "parity" | "par" => Ok(TaskKind::Parity),
            _ => Err(Error::UnknownTaskKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub operands: Vec<u8>,
    pub expected: Vec<u8>,
}

impl TaskInstance {
    pub fn new(kind: TaskKind, operands: Vec<u8>) -> Result<Self> {
        if !(MIN_OPERANDS..=MAX_OPERANDS).contains(&operands.len()) {
            return Err(Error::InvalidConfig(format!(
                "operand count {} outside [{MIN_OPERANDS}, {MAX_OPERANDS}]",
                operands.len()
            )));
        }
        if operands.iter().any(|&d| d > 9) {
            return Err(Error::InvalidConfig("operands must be digits".into()));
        }
        let expected = kind.answer(&operands);
        Ok(Self {
            kind,
            operands,
            expected,
        })
    }

    pub fn prompt(&self) -> Vec<Token> {
        let mut p = Vec::with_capacity(self.operands.len() + 2);
        p.push(self.kind.operator());
        p.extend(self.operands.iter().map(|&d| digit_token(d)));
        p.push(SEP);
        p
    }

    /// The one rewarded response: `[ANS, digits…, EOS]`.
    pub fn canonical_response(&self) -> Vec<Token> {
        let mut r = Vec::with_capacity(self.expected.len() + 2);
        r.push(ANS);
        r.extend(self.expected.iter().map(|&d| digit_token(d)));
        r.push(EOS);
        r
    }
}

/// `difficulty` is the operand count.
pub fn sample_task(rng: &mut Rng, kind: TaskKind, difficulty: usize) -> Result<TaskInstance> {
    if !(MIN_OPERANDS..=MAX_OPERANDS).contains(&difficulty) {
        return Err(Error::InvalidConfig(format!(
            "difficulty {difficulty} outside [{MIN_OPERANDS}, {MAX_OPERANDS}]"
        )));
    }
    let operands = (0..difficulty).map(|_| rng.below(10) as u8).collect();
    TaskInstance::new(kind, operands)
}

/// Binary verifier. Total: every token sequence gets a reward; anything
/// after the first EOS is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verifier {
    pub kind: TaskKind,
}

impl Verifier {
    pub fn new(kind: TaskKind) -> Self {
        Self { kind }
    }

    pub fn verify(&self, instance: &TaskInstance, response: &[Token]) -> f64 {
        let expected = self.kind.answer(&instance.operands);
        let end = response
            .iter()
            .position(|&t| t == EOS)
            .map_or(response.len(), |i| i + 1);
        let response = &response[..end];
        let ok = response.len() == expected.len() + 2
            && response[0] == ANS
            && response[end - 1] == EOS
            && response[1..end - 1]
                .iter()
                .zip(&expected)
                .all(|(&t, &d)| t == digit_token(d));
        if ok {
            1.0
        } else {
            0.0
        }
    }
}

pub fn verify(instance: &TaskInstance, response: &[Token]) -> f64 {
    Verifier::new(instance.kind).verify(instance, response)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSpec {
    /// Number of distinct prompts in the suite.
    pub size: usize,
    pub kinds: Vec<TaskKind>,
    pub min_operands: usize,
    pub max_operands: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            size: 48,
            kinds: TaskKind::ALL.to_vec(),
            min_operands: 2,
            max_operands: 3,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidConfig("suite.size must be >= 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidConfig("suite.kinds must not be empty".into()));
        }
        if self.min_operands < MIN_OPERANDS
            || self.max_operands > MAX_OPERANDS
            || self.min_operands > self.max_operands
        {
            return Err(Error::InvalidConfig(format!(
                "suite operand range [{}, {}] must lie within [{MIN_OPERANDS}, {MAX_OPERANDS}]",
                self.min_operands, self.max_operands
            )));
        }
        Ok(())
    }
}

/// A fixed collection of prompts; kinds cycle so every kind is represented.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub tasks: Vec<TaskInstance>,
}

impl TaskSuite {
    pub fn generate(spec: &SuiteSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let span = spec.max_operands - spec.min_operands + 1;
        let tasks = (0..spec.size)
            .map(|i| {
                let kind = spec.kinds[i % spec.kinds.len()];
                let difficulty = spec.min_operands + rng.below(span);
                sample_task(rng, kind, difficulty)
            })
            .collect::<Result<_>>()?;
        Ok(Self { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tasks {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads `{kind, operands, expected}` lines; `expected` is re-derived and checked.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut tasks = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: TaskInstance = serde_json::from_str(&line)?;
            let t = TaskInstance::new(raw.kind, raw.operands)?;
            if t.expected != raw.expected {
                return Err(Error::InvalidConfig(format!(
                    "suite line has expected {:?} but the rule gives {:?}",
                    raw.expected, t.expected
                )));
            }
            tasks.push(t);
        }
        Ok(Self { tasks })
    }
}
