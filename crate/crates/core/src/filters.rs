//! Sample-level filters: overlong masking, repeat detection and removal of
//! groups whose rewards carry no relative signal.

use crate::error::{Error, Result};
use crate::rollout::{LossMask, Response, RolloutBatch, RolloutGroup};
use crate::scalar::Scalar;
use crate::vocab::TokenId;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupFilterMode {
    #[default]
    Off,
    Drop,
    Refill,
}

impl FromStr for GroupFilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "drop" => Ok(Self::Drop),
            "refill" => Ok(Self::Refill),
            _ => Err(Error::Config(format!("filter.group_mode must be off, drop or refill, got {s:?}"))),
        }
    }
}

impl fmt::Display for GroupFilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Drop => "drop",
            Self::Refill => "refill",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    pub overlong_enabled: bool,
    /// Exclude overlong-masked responses from reward statistics as well.
    pub overlong_exclude_stats: bool,
    pub repeat_min_period: usize,
    pub repeat_min_repeats: usize,
    pub group_filter_mode: GroupFilterMode,
    /// Maximum number of replacement groups sampled per iteration in refill mode.
    pub refill_budget: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            overlong_enabled: false,
            overlong_exclude_stats: true,
            repeat_min_period: 1,
            repeat_min_repeats: 3,
            group_filter_mode: GroupFilterMode::Off,
            refill_budget: 64,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeat_min_period < 1 {
            return Err(Error::Config("filter.repeat_min_period must be >= 1".into()));
        }
        if self.repeat_min_repeats < 2 {
            return Err(Error::Config("filter.repeat_min_repeats must be >= 2".into()));
        }
        Ok(())
    }

    /// Whether a response enters reward statistics.
    pub fn in_stats<T: Scalar>(&self, r: &Response<T>) -> bool {
        !(self.overlong_enabled && self.overlong_exclude_stats && r.truncated())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskReason {
    Overlong,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterReport {
    /// Masked trajectories (flat, group-major) with the reason.
    pub masked: Vec<(usize, MaskReason)>,
    /// Repetitive truncated responses over all truncated responses.
    pub repeat_ratio: f64,
    /// Indices (into the incoming batch) of groups removed from the loss.
    pub dropped_groups: Vec<usize>,
    /// Groups replaced by freshly sampled ones.
    pub refilled_groups: Vec<usize>,
    pub diagnostics: Vec<String>,
}

/// Masks every token of every truncated response.
pub fn overlong_mask<T: Scalar>(batch: &RolloutBatch<T>) -> (LossMask, FilterReport) {
    let mut mask = LossMask::ones(batch);
    let mut report = FilterReport::default();
    for (i, r) in batch.responses().enumerate() {
        if r.truncated() {
            mask.mask_row(i);
            report.masked.push((i, MaskReason::Overlong));
        }
    }
    (mask, report)
}

/// True iff the sequence ends with at least `min_repeats` consecutive copies of
/// some block whose period is at least `min_period`.
pub fn detect_repeat(tokens: &[TokenId], min_period: usize, min_repeats: usize) -> bool {
    let n = tokens.len();
    if min_repeats == 0 {
        return true;
    }
    let max_period = n / min_repeats;
    (min_period.max(1)..=max_period).any(|p| {
        let span = p * min_repeats;
        (1..=span - p).all(|i| tokens[n - i] == tokens[n - i - p])
    })
}

/// `|truncated and repetitive| / |truncated|`, 0 when nothing was truncated.
pub fn repeat_ratio<T: Scalar>(batch: &RolloutBatch<T>, cfg: &FilterConfig) -> f64 {
    let (mut truncated, mut repetitive) = (0usize, 0usize);
    for r in batch.responses().filter(|r| r.truncated()) {
        truncated += 1;
        if detect_repeat(r.tokens().ids(), cfg.repeat_min_period, cfg.repeat_min_repeats) {
            repetitive += 1;
        }
    }
    if truncated == 0 {
        0.0
    } else {
        repetitive as f64 / truncated as f64
    }
}

/// A group is uniform when the rewards entering its statistics are all equal
/// (or fewer than two responses enter them at all).
pub fn is_uniform_group<T: Scalar>(group: &RolloutGroup<T>, cfg: &FilterConfig) -> bool {
    let mut rewards = group.responses().iter().filter(|r| cfg.in_stats(r)).map(|r| r.reward());
    match rewards.next() {
        None => true,
        Some(first) => {
            let rest: Vec<T> = rewards.collect();
            rest.is_empty() || rest.iter().all(|&r| r == first)
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupFilterOutcome<T> {
    /// `None` when every group was removed; the iteration should be skipped.
    pub batch: Option<RolloutBatch<T>>,
    /// For each surviving group, its index in the incoming batch (refilled
    /// groups keep the index of the group they replaced).
    pub kept: Vec<usize>,
    pub report: FilterReport,
}

/// Applies the configured group filter. In refill mode `resample` is called
/// (with a running attempt counter) for replacement groups until each uniform
/// group is replaced or the budget runs out; leftovers are dropped.
pub fn group_filter<T: Scalar>(
    batch: &RolloutBatch<T>,
    cfg: &FilterConfig,
    mut resample: impl FnMut(usize) -> RolloutGroup<T>,
) -> GroupFilterOutcome<T> {
    let mut report = FilterReport::default();
    let all: Vec<usize> = (0..batch.num_groups()).collect();
    if cfg.group_filter_mode == GroupFilterMode::Off {
        return GroupFilterOutcome {
            batch: Some(batch.clone()),
            kept: all,
            report,
        };
    }
    let mut groups: Vec<Option<RolloutGroup<T>>> = batch.groups().iter().cloned().map(Some).collect();
    let mut attempts = 0usize;
    let mut exhausted = false;
    for (g, slot) in groups.iter_mut().enumerate() {
        let group = slot.as_ref().expect("filled");
        if !is_uniform_group(group, cfg) {
            continue;
        }
        let mut replaced = false;
        if cfg.group_filter_mode == GroupFilterMode::Refill {
            while attempts < cfg.refill_budget {
                let candidate = resample(attempts);
                attempts += 1;
                if candidate.size() == batch.group_size() && !is_uniform_group(&candidate, cfg) {
                    *slot = Some(candidate);
                    replaced = true;
                    break;
                }
            }
            exhausted |= !replaced;
        }
        if replaced {
            report.refilled_groups.push(g);
        } else {
            *slot = None;
            report.dropped_groups.push(g);
        }
    }
    if exhausted {
        report.diagnostics.push(format!(
            "refill budget of {} exhausted; {} uniform group(s) dropped",
            cfg.refill_budget,
            report.dropped_groups.len()
        ));
    }
    let kept: Vec<usize> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.is_some())
        .map(|(i, _)| i)
        .collect();
    let survivors: Vec<RolloutGroup<T>> = groups.into_iter().flatten().collect();
    let batch = if survivors.is_empty() {
        report
            .diagnostics
            .push("every group has uniform rewards; iteration skipped".into());
        None
    } else {
        Some(RolloutBatch::new(survivors, batch.policy_version()).expect("uniform group sizes"))
    };
    GroupFilterOutcome { batch, kept, report }
}
