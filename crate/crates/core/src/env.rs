//! Synthetic mod-10 arithmetic task with a rule-based binary verifier.
//!
//! A task `s op1 d1 ... opk dk =` asks for the left fold of the operations over
//! the start digit, modulo 10. The canonical answer is the two-token sequence
//! `[answer, EOS]`.

use crate::error::{Error, Result};
use crate::policy::{sample_response, PolicyParams, SamplerConfig};
use crate::rng::{stream, PURPOSE_DATASET, PURPOSE_EVAL};
use crate::scalar::Scalar;
use crate::vocab::{Op, TokenId, Vocabulary};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyTier {
    Easy,
    Medium,
    Hard,
}

impl DifficultyTier {
    pub const ALL: [DifficultyTier; 3] = [Self::Easy, Self::Medium, Self::Hard];

    /// Inclusive range of operation counts.
    pub fn op_range(self) -> (usize, usize) {
        match self {
            Self::Easy => (1, 1),
            Self::Medium => (2, 3),
            Self::Hard => (4, 6),
        }
    }

    pub fn of_op_count(k: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|t| {
            let (lo, hi) = t.op_range();
            (lo..=hi).contains(&k)
        })
    }
}

impl FromStr for DifficultyTier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::Config(format!("tier must be easy, medium or hard, got {s:?}"))),
        }
    }
}

impl fmt::Display for DifficultyTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Easy => "easy",
            Self::Medium => "medium",
            Self::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArithmeticTask {
    pub start: u8,
    pub ops: Vec<(Op, u8)>,
    pub answer: u8,
}

impl ArithmeticTask {
    pub fn new(start: u8, ops: Vec<(Op, u8)>) -> Self {
        let answer = ops.iter().fold(start, |acc, &(op, d)| op.apply(acc, d));
        Self { start, ops, answer }
    }

    pub fn tier(&self) -> Option<DifficultyTier> {
        DifficultyTier::of_op_count(self.ops.len())
    }

    pub fn prompt_ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(2 * self.ops.len() + 2);
        ids.push(vocab.digit(self.start));
        for &(op, d) in &self.ops {
            ids.push(vocab.op(op));
            ids.push(vocab.digit(d));
        }
        ids.push(vocab.equals());
        ids
    }

    pub fn canonical_response(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        vec![vocab.digit(self.answer), vocab.eos()]
    }

    /// Parses `s op d ... =` back into a task.
    pub fn from_prompt(ids: &[TokenId], vocab: &Vocabulary) -> Result<Self> {
        let bad = || Error::Dataset(format!("malformed prompt {ids:?}"));
        let (&last, body) = ids.split_last().ok_or_else(bad)?;
        if last != vocab.equals() || body.len() < 3 || body.len() % 2 == 0 {
            return Err(bad());
        }
        let start = vocab.as_digit(body[0]).ok_or_else(bad)?;
        let ops = body[1..]
            .chunks(2)
            .map(|p| Ok((vocab.as_op(p[0]).ok_or_else(bad)?, vocab.as_digit(p[1]).ok_or_else(bad)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(start, ops))
    }
}

/// Rule-based verifier. Strict mode rewards exactly `[answer, EOS]`; lenient
/// mode rewards any response whose first token is the answer digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Verifier {
    pub lenient: bool,
}

impl Verifier {
    pub fn verify(&self, task: &ArithmeticTask, response: &[TokenId], vocab: &Vocabulary) -> u8 {
        let ok = if self.lenient {
            response.first() == Some(&vocab.digit(task.answer))
        } else {
            response == task.canonical_response(vocab).as_slice()
        };
        ok as u8
    }
}

/// Strict verification: 1 iff the response is exactly `[answer, EOS]`.
pub fn verify(task: &ArithmeticTask, response: &[TokenId], vocab: &Vocabulary) -> u8 {
    Verifier::default().verify(task, response, vocab)
}

/// `n` tasks of the given tier, deterministic in `seed`.
pub fn gen_dataset(tier: DifficultyTier, n: usize, seed: u64) -> Result<Vec<ArithmeticTask>> {
    if n == 0 {
        return Err(Error::Dataset("dataset size must be >= 1".into()));
    }
    let mut rng = stream(seed, &[PURPOSE_DATASET, tier as u64]);
    let (lo, hi) = tier.op_range();
    Ok((0..n)
        .map(|_| {
            let k = rng.gen_range(lo..=hi);
            let start = rng.gen_range(0..10u8);
            let ops = (0..k)
                .map(|_| (Op::ALL[rng.gen_range(0..3)], rng.gen_range(0..10u8)))
                .collect();
            ArithmeticTask::new(start, ops)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub prompt_ids: Vec<TokenId>,
    pub answer_id: TokenId,
    pub k: usize,
    pub tier: DifficultyTier,
}

pub fn write_dataset<W: Write>(tasks: &[ArithmeticTask], vocab: &Vocabulary, mut out: W) -> Result<()> {
    for t in tasks {
        let entry = DatasetEntry {
            prompt_ids: t.prompt_ids(vocab),
            answer_id: vocab.digit(t.answer),
            k: t.ops.len(),
            tier: t
                .tier()
                .ok_or_else(|| Error::Dataset(format!("{} ops fits no tier", t.ops.len())))?,
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset file, checking every entry against an independent re-fold.
pub fn read_dataset<R: BufRead>(input: R, vocab: &Vocabulary) -> Result<Vec<ArithmeticTask>> {
    let mut tasks = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: DatasetEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Dataset(format!("line {}: {err}", lineno + 1)))?;
        let task = ArithmeticTask::from_prompt(&e.prompt_ids, vocab)?;
        if vocab.digit(task.answer) != e.answer_id || task.ops.len() != e.k || task.tier() != Some(e.tier) {
            return Err(Error::Dataset(format!("line {}: entry inconsistent with its prompt", lineno + 1)));
        }
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DifficultyHistogram {
    /// Correct count out of `K` for each task.
    pub per_task: Vec<usize>,
    /// `counts[c]` = number of tasks with exactly `c` correct rollouts.
    pub counts: Vec<usize>,
}

/// Correct-count histogram under `k` sampled rollouts per task.
pub fn difficulty_histogram<T: Scalar>(
    dataset: &[ArithmeticTask],
    params: &PolicyParams<T>,
    sampler: &SamplerConfig<T>,
    verifier: Verifier,
    vocab: &Vocabulary,
    k: usize,
    seed: u64,
) -> DifficultyHistogram {
    assert!(k >= 1, "need at least one rollout per task");
    let per_task: Vec<usize> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = stream(seed, &[PURPOSE_EVAL, i as u64]);
            let prompt = task.prompt_ids(vocab);
            (0..k)
                .map(|_| {
                    let s = sample_response(params, &prompt, sampler, vocab, &mut rng);
                    verifier.verify(task, s.response.tokens().ids(), vocab) as usize
                })
                .sum()
        })
        .collect();
    let mut counts = vec![0; k + 1];
    for &c in &per_task {
        counts[c] += 1;
    }
    DifficultyHistogram { per_task, counts }
}
