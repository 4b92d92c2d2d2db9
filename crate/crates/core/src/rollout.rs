//! Data model for prompts, grouped responses, masks and rollout batches.
//!
//! Trajectories are always addressed in group-major, response-minor order:
//! flat index `g * K + k` is response `k` of group `g`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::{TokenId, Vocabulary};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        let seq = Self(ids);
        seq.validate(vocab)?;
        Ok(seq)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if let Some(&bad) = self.0.iter().find(|&&id| !vocab.contains(id)) {
            return Err(Error::Rollout(format!(
                "token id {bad} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        let eos = vocab.eos();
        if let Some(pos) = self.0.iter().position(|&id| id == eos) {
            if pos + 1 != self.0.len() {
                return Err(Error::Rollout("EOS must be the final token".into()));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self, vocab: &Vocabulary) -> bool {
        self.0.last() == Some(&vocab.eos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Response<T> {
    tokens: TokenSeq,
    #[serde(rename = "logprobs")]
    behavior_logprobs: Vec<T>,
    reward: T,
    truncated: bool,
}

impl<T: Scalar> Response<T> {
    pub fn new(
        tokens: TokenSeq,
        behavior_logprobs: Vec<T>,
        reward: T,
        truncated: bool,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let r = Self {
            tokens,
            behavior_logprobs,
            reward,
            truncated,
        };
        r.validate(vocab)?;
        Ok(r)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        self.tokens.validate(vocab)?;
        if self.tokens.is_empty() {
            return Err(Error::Rollout("responses must contain at least one token".into()));
        }
        if self.behavior_logprobs.len() != self.tokens.len() {
            return Err(Error::Rollout(format!(
                "{} logprobs for {} tokens",
                self.behavior_logprobs.len(),
                self.tokens.len()
            )));
        }
        if let Some(lp) = self
            .behavior_logprobs
            .iter()
            .find(|lp| !lp.is_finite() || **lp > T::zero())
        {
            return Err(Error::Rollout(format!("behavior logprob {lp} is not a finite value <= 0")));
        }
        if !self.reward.is_finite() {
            return Err(Error::Rollout("reward must be finite".into()));
        }
        if self.truncated && self.tokens.ends_with_eos(vocab) {
            return Err(Error::Rollout("truncated response cannot contain EOS".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &TokenSeq {
        &self.tokens
    }

    pub fn behavior_logprobs(&self) -> &[T] {
        &self.behavior_logprobs
    }

    pub fn reward(&self) -> T {
        self.reward
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn with_reward(&self, reward: T) -> Self {
        Self {
            reward,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RolloutGroup<T> {
    prompt: TokenSeq,
    responses: Vec<Response<T>>,
}

impl<T: Scalar> RolloutGroup<T> {
    pub fn new(prompt: TokenSeq, responses: Vec<Response<T>>) -> Result<Self> {
        if responses.len() < 2 {
            return Err(Error::Rollout(format!(
                "group size must be >= 2, got {}",
                responses.len()
            )));
        }
        Ok(Self { prompt, responses })
    }

    pub fn prompt(&self) -> &TokenSeq {
        &self.prompt
    }

    pub fn responses(&self) -> &[Response<T>] {
        &self.responses
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }

    pub fn rewards(&self) -> Vec<T> {
        self.responses.iter().map(Response::reward).collect()
    }
}

/// `N` prompt groups of `K` responses each, sampled from one behavior snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch<T> {
    groups: Vec<RolloutGroup<T>>,
    policy_version: u64,
}

impl<T: Scalar> RolloutBatch<T> {
    pub fn new(groups: Vec<RolloutGroup<T>>, policy_version: u64) -> Result<Self> {
        let Some(first) = groups.first() else {
            return Err(Error::Rollout("batch must contain at least one group".into()));
        };
        let k = first.size();
        if let Some(g) = groups.iter().position(|g| g.size() != k) {
            return Err(Error::Rollout(format!(
                "ragged batch: group {g} has {} responses, expected {k}",
                groups[g].size()
            )));
        }
        Ok(Self {
            groups,
            policy_version,
        })
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for g in &self.groups {
            g.prompt.validate(vocab)?;
            for r in &g.responses {
                r.validate(vocab)?;
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> &[RolloutGroup<T>] {
        &self.groups
    }

    pub fn policy_version(&self) -> u64 {
        self.policy_version
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_size(&self) -> usize {
        self.groups[0].size()
    }

    pub fn num_trajectories(&self) -> usize {
        self.num_groups() * self.group_size()
    }

    /// Responses in group-major order.
    pub fn responses(&self) -> impl Iterator<Item = &Response<T>> + '_ {
        self.groups.iter().flat_map(|g| g.responses.iter())
    }

    pub fn response(&self, flat: usize) -> &Response<T> {
        let k = self.group_size();
        &self.groups[flat / k].responses[flat % k]
    }

    /// Rebuilds the batch with rewards replaced, keeping everything else.
    pub fn map_rewards(&self, mut f: impl FnMut(T) -> T) -> Self {
        let groups = self
            .groups
            .iter()
            .map(|g| RolloutGroup {
                prompt: g.prompt.clone(),
                responses: g.responses.iter().map(|r| r.with_reward(f(r.reward))).collect(),
            })
            .collect();
        Self {
            groups,
            policy_version: self.policy_version,
        }
    }

    /// Keeps the groups whose indices are listed (in the given order).
    pub fn select_groups(&self, keep: &[usize]) -> Option<Self> {
        if keep.is_empty() {
            return None;
        }
        Some(Self {
            groups: keep.iter().map(|&g| self.groups[g].clone()).collect(),
            policy_version: self.policy_version,
        })
    }

    pub fn write_log<W: Write>(&self, mut out: W) -> Result<()> {
        for g in &self.groups {
            let line = LogLine {
                prompt: &g.prompt,
                responses: &g.responses,
                policy_version: self.policy_version,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads every batch in a rollout log. Consecutive lines that share a
    /// `policy_version` belong to the same batch.
    pub fn read_log<R: BufRead>(input: R, vocab: &Vocabulary) -> Result<Vec<Self>> {
        let mut batches = Vec::new();
        let mut current: Vec<RolloutGroup<T>> = Vec::new();
        let mut version = None;
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: OwnedLogLine<T> = serde_json::from_str(&line)?;
            if version.is_some_and(|v| v != parsed.policy_version) {
                batches.push(Self::new(std::mem::take(&mut current), version.unwrap())?);
            }
            version = Some(parsed.policy_version);
            current.push(RolloutGroup::new(parsed.prompt, parsed.responses)?);
        }
        if let Some(v) = version {
            batches.push(Self::new(current, v)?);
        }
        for b in &batches {
            b.validate(vocab)?;
        }
        Ok(batches)
    }
}

#[derive(Serialize)]
#[serde(bound = "T: Scalar")]
struct LogLine<'a, T> {
    prompt: &'a TokenSeq,
    responses: &'a [Response<T>],
    policy_version: u64,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct OwnedLogLine<T> {
    prompt: TokenSeq,
    responses: Vec<Response<T>>,
    policy_version: u64,
}

/// Per-token binary loss weights, one row per trajectory (group-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    rows: Vec<Vec<bool>>,
}

impl LossMask {
    pub fn ones<T: Scalar>(batch: &RolloutBatch<T>) -> Self {
        Self {
            rows: batch.responses().map(|r| vec![true; r.len()]).collect(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Self {
        Self { rows }
    }

    pub fn from_lengths(lengths: &[usize]) -> Self {
        Self {
            rows: lengths.iter().map(|&n| vec![true; n]).collect(),
        }
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.rows[i]
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn mask_row(&mut self, i: usize) {
        self.rows[i].iter_mut().for_each(|m| *m = false);
    }

    pub fn is_row_masked(&self, i: usize) -> bool {
        self.rows[i].iter().all(|m| !m)
    }

    pub fn active_count(&self, i: usize) -> usize {
        self.rows[i].iter().filter(|&&m| m).count()
    }

    pub fn total_active(&self) -> usize {
        (0..self.rows.len()).map(|i| self.active_count(i)).sum()
    }

    pub fn is_congruent<V>(&self, values: &[Vec<V>]) -> bool {
        self.rows.len() == values.len()
            && self.rows.iter().zip(values).all(|(m, v)| m.len() == v.len())
    }

    /// Elementwise AND of two congruent masks.
    pub fn and(&self, other: &LossMask) -> LossMask {
        LossMask {
            rows: self
                .rows
                .iter()
                .zip(&other.rows)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x && *y).collect())
                .collect(),
        }
    }

    /// Rows of the listed groups, for a batch with `group_size` responses per group.
    pub fn select_groups(&self, keep: &[usize], group_size: usize) -> LossMask {
        LossMask {
            rows: keep
                .iter()
                .flat_map(|&g| self.rows[g * group_size..(g + 1) * group_size].iter().cloned())
                .collect(),
        }
    }
}

/// Rewards in group-major, response-minor order.
pub fn flatten_rewards<T: Scalar>(batch: &RolloutBatch<T>) -> Vec<T> {
    batch.responses().map(Response::reward).collect()
}

/// Inverse of [`flatten_rewards`] for a known group size.
pub fn regroup<T: Copy>(flat: &[T], group_size: usize) -> Vec<Vec<T>> {
    flat.chunks(group_size).map(<[T]>::to_vec).collect()
}

/// Per-response token counts `|o_i|` in group-major order.
pub fn token_counts<T: Scalar>(batch: &RolloutBatch<T>) -> Vec<usize> {
    batch.responses().map(Response::len).collect()
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Builds a batch from per-group `(tokens, reward)` specs with zero logprobs.
    pub fn batch_from(groups: &[Vec<(Vec<TokenId>, f64, bool)>]) -> RolloutBatch<f64> {
        let vocab = Vocabulary::default();
        let groups = groups
            .iter()
            .map(|g| {
                let responses = g
                    .iter()
                    .map(|(toks, r, trunc)| {
                        Response::new(
                            TokenSeq::new(toks.clone(), &vocab).unwrap(),
                            vec![-0.5; toks.len()],
                            *r,
                            *trunc,
                            &vocab,
                        )
                        .unwrap()
                    })
                    .collect();
                RolloutGroup::new(TokenSeq::new(vec![1, 10, 2, 13], &vocab).unwrap(), responses)
                    .unwrap()
            })
            .collect();
        RolloutBatch::new(groups, 0).unwrap()
    }

    pub fn rewards_batch(rewards: &[&[f64]]) -> RolloutBatch<f64> {
        let specs: Vec<Vec<_>> = rewards
            .iter()
            .map(|g| g.iter().map(|&r| (vec![3, 14], r, false)).collect())
            .collect();
        batch_from(&specs)
    }
}
