//! Critic-free advantage estimation.
//!
//! Each trajectory receives one scalar advantage computed from reward
//! statistics; the scalar is then broadcast to every token of the trajectory.
//! Standard deviations are population statistics (divide by the count) and
//! every std denominator is guarded as `std + eps`.

use crate::error::{Error, Result};
use crate::rollout::{token_counts, RolloutBatch};
use crate::scalar::{mean_std, Scalar};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RewardScale {
    /// `r' = r`
    #[default]
    ZeroOne,
    /// `r' = 2r - 1`
    PlusMinusOne,
}

impl RewardScale {
    pub fn map<T: Scalar>(self, raw: T) -> T {
        match self {
            RewardScale::ZeroOne => raw,
            RewardScale::PlusMinusOne => T::lit(2.0) * raw - T::one(),
        }
    }
}

impl FromStr for RewardScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_one" => Ok(Self::ZeroOne),
            "pm_one" => Ok(Self::PlusMinusOne),
            _ => Err(Error::Config(format!(
                "adv.reward_scale must be zero_one or pm_one, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for RewardScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ZeroOne => "zero_one",
            Self::PlusMinusOne => "pm_one",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormVariant {
    /// Raw (scaled) reward as the advantage.
    None,
    /// Group mean and group std.
    #[default]
    GroupMeanStd,
    /// Batch mean and batch std over all `N * K` rewards.
    BatchMeanStd,
    /// Group mean subtracted, no std division.
    GroupMeanOnly,
    /// Batch mean subtracted, no std division.
    BatchMeanOnly,
    /// Group mean subtracted, divided by the batch std.
    GroupMeanBatchStd,
}

impl NormVariant {
    pub const ALL: [NormVariant; 6] = [
        NormVariant::None,
        NormVariant::GroupMeanStd,
        NormVariant::BatchMeanStd,
        NormVariant::GroupMeanOnly,
        NormVariant::BatchMeanOnly,
        NormVariant::GroupMeanBatchStd,
    ];

    /// Variants whose advantage involves a group-mean baseline and a std
    /// denominator; degenerate groups are reported for these.
    pub fn reports_degenerate(self) -> bool {
        matches!(self, Self::GroupMeanStd | Self::GroupMeanBatchStd)
    }
}

impl FromStr for NormVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "group" => Self::GroupMeanStd,
            "batch" => Self::BatchMeanStd,
            "group_mean_only" => Self::GroupMeanOnly,
            "batch_mean_only" => Self::BatchMeanOnly,
            "group_mean_batch_std" => Self::GroupMeanBatchStd,
            _ => {
                return Err(Error::Config(format!(
                    "adv.norm must be one of none, group, batch, group_mean_only, \
                     batch_mean_only, group_mean_batch_std; got {s:?}"
                )))
            }
        })
    }
}

impl fmt::Display for NormVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::GroupMeanStd => "group",
            Self::BatchMeanStd => "batch",
            Self::GroupMeanOnly => "group_mean_only",
            Self::BatchMeanOnly => "batch_mean_only",
            Self::GroupMeanBatchStd => "group_mean_batch_std",
        })
    }
}

/// Which rewards the batch std of `GroupMeanBatchStd` is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BatchStdSource {
    /// Uncentered batch rewards.
    #[default]
    Raw,
    /// Rewards after subtracting their group mean.
    GroupCentered,
}

impl FromStr for BatchStdSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "centered" => Ok(Self::GroupCentered),
            _ => Err(Error::Config(format!("adv.batch_std_of must be raw or centered, got {s:?}"))),
        }
    }
}

impl fmt::Display for BatchStdSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::GroupCentered => "centered",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStrategy<T> {
    variant: NormVariant,
    epsilon_guard: T,
    batch_std_source: BatchStdSource,
}

impl<T: Scalar> NormStrategy<T> {
    pub fn new(variant: NormVariant, epsilon_guard: T) -> Result<Self> {
        if !(epsilon_guard > T::zero()) || !epsilon_guard.is_finite() {
            return Err(Error::Config(format!("adv.eps must be > 0, got {epsilon_guard}")));
        }
        Ok(Self {
            variant,
            epsilon_guard,
            batch_std_source: BatchStdSource::Raw,
        })
    }

    pub fn with_batch_std_source(mut self, source: BatchStdSource) -> Self {
        self.batch_std_source = source;
        self
    }

    pub fn variant(&self) -> NormVariant {
        self.variant
    }

    pub fn epsilon_guard(&self) -> T {
        self.epsilon_guard
    }

    pub fn batch_std_source(&self) -> BatchStdSource {
        self.batch_std_source
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTensor<T> {
    /// One scalar per trajectory, group-major.
    pub trajectory: Vec<T>,
    /// The trajectory scalars broadcast to each token.
    pub tokens: Vec<Vec<T>>,
    /// Groups whose reward std fell below the epsilon guard.
    pub degenerate_groups: Vec<usize>,
}

/// Maps raw binary correctness rewards onto the configured scale.
pub fn apply_reward_scale<T: Scalar>(
    batch: &RolloutBatch<T>,
    scale: RewardScale,
) -> Result<RolloutBatch<T>> {
    if let Some(r) = batch
        .responses()
        .map(|r| r.reward())
        .find(|&r| r != T::zero() && r != T::one())
    {
        return Err(Error::NonBinaryReward(r.as_f64()));
    }
    Ok(batch.map_rewards(|r| scale.map(r)))
}

/// Population mean and std of one group's rewards.
pub fn group_stats<T: Scalar>(rewards: &[T]) -> (T, T) {
    debug_assert!(rewards.len() >= 2, "group statistics need K >= 2");
    mean_std(rewards)
}

/// Advantages over every trajectory of the batch.
pub fn compute_advantages<T: Scalar>(
    batch: &RolloutBatch<T>,
    strategy: &NormStrategy<T>,
) -> AdvantageTensor<T> {
    compute_advantages_masked(batch, strategy, None)
}

/// Advantages where only trajectories with `include[i] == true` enter the
/// reward statistics. Excluded trajectories receive a zero advantage.
pub fn compute_advantages_masked<T: Scalar>(
    batch: &RolloutBatch<T>,
    strategy: &NormStrategy<T>,
    include: Option<&[bool]>,
) -> AdvantageTensor<T> {
    let k = batch.group_size();
    let rewards: Vec<T> = batch.responses().map(|r| r.reward()).collect();
    let included = |i: usize| include.is_none_or(|m| m[i]);
    let eps = strategy.epsilon_guard;

    let pick = |range: std::ops::Range<usize>| -> Vec<T> {
        range.filter(|&i| included(i)).map(|i| rewards[i]).collect()
    };

    let group_stats: Vec<(T, T)> = (0..batch.num_groups())
        .map(|g| mean_std(&pick(g * k..(g + 1) * k)))
        .collect();
    let (batch_mean, batch_std) = mean_std(&pick(0..rewards.len()));
    let batch_std_for_group_mean = match strategy.batch_std_source {
        BatchStdSource::Raw => batch_std,
        BatchStdSource::GroupCentered => {
            let centered: Vec<T> = (0..rewards.len())
                .filter(|&i| included(i))
                .map(|i| rewards[i] - group_stats[i / k].0)
                .collect();
            mean_std(&centered).1
        }
    };

    let trajectory: Vec<T> = (0..rewards.len())
        .map(|i| {
            if !included(i) {
                return T::zero();
            }
            let r = rewards[i];
            let (gm, gs) = group_stats[i / k];
            match strategy.variant {
                NormVariant::None => r,
                NormVariant::GroupMeanStd => (r - gm) / (gs + eps),
                NormVariant::BatchMeanStd => (r - batch_mean) / (batch_std + eps),
                NormVariant::GroupMeanOnly => r - gm,
                NormVariant::BatchMeanOnly => r - batch_mean,
                NormVariant::GroupMeanBatchStd => (r - gm) / (batch_std_for_group_mean + eps),
            }
        })
        .collect();

    let degenerate_groups = if strategy.variant.reports_degenerate() {
        group_stats
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| *s < eps)
            .map(|(g, _)| g)
            .collect()
    } else {
        Vec::new()
    };

    let tokens = token_counts(batch)
        .into_iter()
        .zip(&trajectory)
        .map(|(n, &a)| vec![a; n])
        .collect();

    AdvantageTensor {
        trajectory,
        tokens,
        degenerate_groups,
    }
}
