//! Clipped policy-gradient surrogate with decoupled bounds.
//!
//! Sign convention: every function here returns a *loss to minimize*, i.e. the
//! negated objective.

use crate::advantage::AdvantageTensor;
use crate::error::{Error, Result};
use crate::rollout::{LossMask, RolloutBatch};
use crate::scalar::Scalar;
use crate::vocab::TokenId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Bound on `|new - old|` before exponentiating a log-ratio.
pub const LOG_RATIO_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig<T> {
    eps_low: T,
    eps_high: T,
}

impl<T: Scalar> ClipConfig<T> {
    pub fn new(eps_low: T, eps_high: T) -> Result<Self> {
        let ok = eps_low > T::zero() && eps_low <= eps_high && eps_high < T::one();
        if !ok {
            return Err(Error::Config(format!(
                "clip bounds must satisfy 0 < eps_low <= eps_high < 1, got ({eps_low}, {eps_high})"
            )));
        }
        Ok(Self { eps_low, eps_high })
    }

    pub fn symmetric(eps: T) -> Result<Self> {
        Self::new(eps, eps)
    }

    pub fn eps_low(&self) -> T {
        self.eps_low
    }

    pub fn eps_high(&self) -> T {
        self.eps_high
    }

    pub fn lower(&self) -> T {
        T::one() - self.eps_low
    }

    pub fn upper(&self) -> T {
        T::one() + self.eps_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Aggregation {
    /// Sum over every unmasked token divided by the total unmasked token count.
    #[default]
    TokenLevel,
    /// Mean over responses of each response's per-token mean.
    SequenceLevel,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::TokenLevel),
            "seq" => Ok(Self::SequenceLevel),
            _ => Err(Error::Config(format!("loss.agg must be token or seq, got {s:?}"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TokenLevel => "token",
            Self::SequenceLevel => "seq",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T> {
    pub clip: ClipConfig<T>,
    pub aggregation: Aggregation,
    kl_coef: T,
}

impl<T: Scalar> LossConfig<T> {
    pub fn new(clip: ClipConfig<T>, aggregation: Aggregation, kl_coef: T) -> Result<Self> {
        if !(kl_coef >= T::zero()) || !kl_coef.is_finite() {
            return Err(Error::Config(format!("loss.kl_coef must be >= 0, got {kl_coef}")));
        }
        Ok(Self {
            clip,
            aggregation,
            kl_coef,
        })
    }

    pub fn kl_coef(&self) -> T {
        self.kl_coef
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipDirection {
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEvent<T> {
    pub trajectory: usize,
    pub position: usize,
    pub token: TokenId,
    pub direction: ClipDirection,
    pub ratio: T,
}

/// Clip events in batch order plus per-token-id totals.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEventLog<T> {
    pub events: Vec<ClipEvent<T>>,
    counts: BTreeMap<TokenId, (usize, usize)>,
}

impl<T> Default for ClipEventLog<T> {
    fn default() -> Self {
        Self {
            events: Vec::new(),
            counts: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ClipEventLog<T> {
    pub fn push(&mut self, event: ClipEvent<T>) {
        let entry = self.counts.entry(event.token).or_default();
        match event.direction {
            ClipDirection::Upper => entry.0 += 1,
            ClipDirection::Lower => entry.1 += 1,
        }
        self.events.push(event);
    }

    pub fn extend(&mut self, other: ClipEventLog<T>) {
        for e in other.events {
            self.push(e);
        }
    }

    /// `(upper, lower)` counts per token id.
    pub fn counts(&self) -> &BTreeMap<TokenId, (usize, usize)> {
        &self.counts
    }

    pub fn upper(&self) -> usize {
        self.counts.values().map(|c| c.0).sum()
    }

    pub fn lower(&self) -> usize {
        self.counts.values().map(|c| c.1).sum()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// `exp(new - old)` with the log-difference clamped to `±30`.
pub fn token_ratio<T: Scalar>(new_logprob: T, behavior_logprob: T) -> T {
    let c = T::lit(LOG_RATIO_CLAMP);
    (new_logprob - behavior_logprob).max(-c).min(c).exp()
}

/// `min(ratio * A, clip(ratio) * A)`, with the clip direction reported when the
/// clipped branch is strictly selected (which zeroes the ratio gradient).
pub fn clipped_term<T: Scalar>(
    ratio: T,
    advantage: T,
    clip: &ClipConfig<T>,
) -> (T, Option<ClipDirection>) {
    let unclipped = ratio * advantage;
    if advantage > T::zero() && ratio > clip.upper() {
        (clip.upper() * advantage, Some(ClipDirection::Upper))
    } else if advantage < T::zero() && ratio < clip.lower() {
        (clip.lower() * advantage, Some(ClipDirection::Lower))
    } else {
        (unclipped, None)
    }
}

/// Exact categorical KL divergence `sum p ln(p / q)`.
pub fn kl_penalty<T: Scalar>(new_dist: &[T], ref_dist: &[T]) -> Result<T> {
    if new_dist.len() != ref_dist.len() {
        return Err(Error::Config("kl: distributions differ in size".into()));
    }
    for d in [new_dist, ref_dist] {
        let s = d.iter().copied().sum::<T>();
        if (s - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::Unnormalized(s.as_f64()));
        }
    }
    let mut kl = T::zero();
    for (i, (&p, &q)) in new_dist.iter().zip(ref_dist).enumerate() {
        if p > T::zero() {
            if q <= T::zero() {
                return Err(Error::KlSupport(i));
            }
            kl = kl + p * (p / q).ln();
        }
    }
    Ok(kl.max(T::zero()))
}

/// Per-token weights `w` such that the aggregate equals `sum w * v`.
/// The flag is true when every token is masked (all weights zero).
pub fn aggregation_weights<T: Scalar>(mask: &LossMask, mode: Aggregation) -> (Vec<Vec<T>>, bool) {
    let active: Vec<usize> = (0..mask.num_rows()).map(|i| mask.active_count(i)).collect();
    let total: usize = active.iter().sum();
    let live = active.iter().filter(|&&n| n > 0).count();
    let weights = mask
        .rows()
        .iter()
        .zip(&active)
        .map(|(row, &n)| {
            let w = match mode {
                _ if n == 0 => T::zero(),
                Aggregation::TokenLevel => T::one() / T::from_usize_lossy(total),
                Aggregation::SequenceLevel => {
                    T::one() / (T::from_usize_lossy(live) * T::from_usize_lossy(n))
                }
            };
            row.iter().map(|&m| if m { w } else { T::zero() }).collect()
        })
        .collect();
    (weights, total == 0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate<T> {
    pub value: T,
    /// Set when every token was masked; `value` is then 0.
    pub all_masked: bool,
}

pub fn aggregate<T: Scalar>(values: &[Vec<T>], mask: &LossMask, mode: Aggregation) -> Aggregate<T> {
    assert!(mask.is_congruent(values), "mask not congruent with values");
    let (weights, all_masked) = aggregation_weights::<T>(mask, mode);
    let value = match mode {
        // Per-response means first so the arithmetic mirrors the objective.
        Aggregation::SequenceLevel => {
            let means: Vec<T> = values
                .iter()
                .zip(mask.rows())
                .filter(|(_, m)| m.iter().any(|&x| x))
                .map(|(v, m)| {
                    let n = m.iter().filter(|&&x| x).count();
                    let s = v.iter().zip(m).filter(|(_, &x)| x).map(|(&y, _)| y).sum::<T>();
                    s / T::from_usize_lossy(n)
                })
                .collect();
            if means.is_empty() {
                T::zero()
            } else {
                means.iter().copied().sum::<T>() / T::from_usize_lossy(means.len())
            }
        }
        Aggregation::TokenLevel => values
            .iter()
            .zip(&weights)
            .flat_map(|(v, w)| v.iter().zip(w).map(|(&a, &b)| a * b))
            .sum::<T>(),
    };
    Aggregate { value, all_masked }
}

/// Everything the surrogate needs for one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryTerms<'a, T> {
    pub tokens: &'a [TokenId],
    pub behavior_logprobs: &'a [T],
    pub new_logprobs: &'a [T],
    pub advantages: &'a [T],
    pub mask: &'a [bool],
    /// Per-token `KL(pi_theta || pi_ref)` at each generation step.
    pub kl: Option<&'a [T]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurrogateDiagnostics<T> {
    pub clip_frac_high: T,
    pub clip_frac_low: T,
    pub active_tokens: usize,
    pub all_masked: bool,
    /// Largest `|new - old|` log-ratio over active tokens.
    pub max_abs_log_ratio: T,
    pub mean_kl: T,
}

#[derive(Debug, Clone)]
pub struct SurrogateOutput<T> {
    pub loss: T,
    pub events: ClipEventLog<T>,
    pub diagnostics: SurrogateDiagnostics<T>,
    /// `d loss / d new_logprob` per token.
    pub grad_new_logprob: Vec<Vec<T>>,
    /// `d loss / d kl` per token (zero when the KL coefficient is zero).
    pub grad_kl: Vec<Vec<T>>,
}

/// Surrogate loss over an arbitrary list of trajectories (a minibatch).
pub fn surrogate_over<T: Scalar>(
    trajectories: &[TrajectoryTerms<'_, T>],
    config: &LossConfig<T>,
) -> SurrogateOutput<T> {
    let mask = LossMask::from_rows(trajectories.iter().map(|t| t.mask.to_vec()).collect());
    let (weights, all_masked) = aggregation_weights::<T>(&mask, config.aggregation);
    let clamp = T::lit(LOG_RATIO_CLAMP);

    let mut events = ClipEventLog::default();
    let mut clipped_values = Vec::with_capacity(trajectories.len());
    let mut grad_new = Vec::with_capacity(trajectories.len());
    let mut max_abs = T::zero();

    for (ti, tr) in trajectories.iter().enumerate() {
        let n = tr.tokens.len();
        let mut vals = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        for t in 0..n {
            let diff = tr.new_logprobs[t] - tr.behavior_logprobs[t];
            let ratio = token_ratio(tr.new_logprobs[t], tr.behavior_logprobs[t]);
            let adv = tr.advantages[t];
            let (value, event) = clipped_term(ratio, adv, &config.clip);
            vals.push(value);
            let w = weights[ti][t];
            let dvalue = if event.is_some() || diff.abs() > clamp {
                T::zero()
            } else {
                ratio * adv
            };
            grads.push(-w * dvalue);
            if tr.mask[t] {
                max_abs = max_abs.max(diff.abs());
                if let Some(direction) = event {
                    events.push(ClipEvent {
                        trajectory: ti,
                        position: t,
                        token: tr.tokens[t],
                        direction,
                        ratio,
                    });
                }
            }
        }
        clipped_values.push(vals);
        grad_new.push(grads);
    }

    let objective = aggregate(&clipped_values, &mask, config.aggregation);
    let beta = config.kl_coef;
    let (kl_term, grad_kl) = if beta > T::zero() {
        let kl_vals: Vec<Vec<T>> = trajectories
            .iter()
            .map(|t| {
                t.kl
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); t.tokens.len()])
            })
            .collect();
        let agg = aggregate(&kl_vals, &mask, config.aggregation).value;
        let g = weights
            .iter()
            .map(|row| row.iter().map(|&w| beta * w).collect())
            .collect();
        (agg, g)
    } else {
        let g = trajectories.iter().map(|t| vec![T::zero(); t.tokens.len()]).collect();
        (T::zero(), g)
    };

    let active = mask.total_active();
    let frac = |c: usize| {
        if active == 0 {
            T::zero()
        } else {
            T::from_usize_lossy(c) / T::from_usize_lossy(active)
        }
    };
    let diagnostics = SurrogateDiagnostics {
        clip_frac_high: frac(events.upper()),
        clip_frac_low: frac(events.lower()),
        active_tokens: active,
        all_masked,
        max_abs_log_ratio: max_abs,
        mean_kl: kl_term,
    };
    let loss = if all_masked {
        T::zero()
    } else {
        -objective.value + beta * kl_term
    };
    SurrogateOutput {
        loss,
        events,
        diagnostics,
        grad_new_logprob: grad_new,
        grad_kl,
    }
}

/// Surrogate loss over a whole rollout batch.
pub fn surrogate_loss<T: Scalar>(
    batch: &RolloutBatch<T>,
    advantages: &AdvantageTensor<T>,
    new_logprobs: &[Vec<T>],
    mask: &LossMask,
    kl: Option<&[Vec<T>]>,
    config: &LossConfig<T>,
) -> Result<SurrogateOutput<T>> {
    if !mask.is_congruent(new_logprobs) || !mask.is_congruent(&advantages.tokens) {
        return Err(Error::Rollout("mask, advantages and logprobs are not aligned".into()));
    }
    let terms: Vec<TrajectoryTerms<'_, T>> = batch
        .responses()
        .enumerate()
        .map(|(i, r)| TrajectoryTerms {
            tokens: r.tokens().ids(),
            behavior_logprobs: r.behavior_logprobs(),
            new_logprobs: &new_logprobs[i],
            advantages: &advantages.tokens[i],
            mask: mask.row(i),
            kl: kl.map(|k| k[i].as_slice()),
        })
        .collect();
    Ok(surrogate_over(&terms, config))
}
