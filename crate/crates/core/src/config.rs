//! Run configuration: a flat key/value document with dotted keys.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! ```
//!
//! Blank lines and `#` comments are ignored; whitespace around keys and values
//! is trimmed; values are unquoted. A configuration is resolved by expanding a
//! preset, then applying the file entries, then command-line overrides. The
//! resolved configuration serializes back to the same grammar with every key
//! present, sorted.

use crate::advantage::{BatchStdSource, NormStrategy, NormVariant, RewardScale};
use crate::error::{Error, Result};
use crate::filters::{FilterConfig, GroupFilterMode};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::policy::SamplerConfig;
use crate::scalar::Scalar;
use crate::surrogate::{Aggregation, ClipConfig, LossConfig};
use crate::vocab::Vocabulary;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Vanilla,
    Grpo,
    DapoLite,
    LitePpo,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Self::Vanilla, Self::Grpo, Self::DapoLite, Self::LitePpo];
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "grpo" => Ok(Self::Grpo),
            "dapo-lite" => Ok(Self::DapoLite),
            "litepo" => Ok(Self::LitePpo),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected vanilla, grpo, dapo-lite or litepo)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Grpo => "grpo",
            Self::DapoLite => "dapo-lite",
            Self::LitePpo => "litepo",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub name: String,
    pub preset: Preset,
    pub seed: u64,
    pub max_steps: usize,
    pub save_steps: usize,
    pub eval_steps: usize,
    pub threads: usize,
    pub log_rollouts: bool,

    pub data_path: String,
    pub heldout_frac: f64,

    pub batch_size: usize,
    pub group_size: usize,
    pub minibatches: usize,
    pub ppo_epochs: usize,

    pub optim_kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub adv_norm: NormVariant,
    pub reward_scale: RewardScale,
    pub adv_eps: f64,
    pub batch_std_of: BatchStdSource,

    pub eps_low: f64,
    pub eps_high: f64,
    pub aggregation: Aggregation,
    pub kl_coef: f64,

    pub overlong: bool,
    pub overlong_exclude_stats: bool,
    pub repeat_min_period: usize,
    pub repeat_min_repeats: usize,
    pub group_mode: GroupFilterMode,
    pub refill_budget: usize,

    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,

    pub lenient: bool,
    pub vocab_size: usize,
    pub context: usize,
    pub ngram_order: usize,
    pub ngram_scale: f64,
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            name: preset.to_string(),
            preset,
            seed: 42,
            max_steps: 300,
            save_steps: 50,
            eval_steps: 10,
            threads: 0,
            log_rollouts: false,
            data_path: String::new(),
            heldout_frac: 0.1,
            batch_size: 64,
            group_size: 8,
            minibatches: 4,
            ppo_epochs: 1,
            optim_kind: OptimizerKind::Adam,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            adv_norm: NormVariant::None,
            reward_scale: RewardScale::ZeroOne,
            adv_eps: 1e-6,
            batch_std_of: BatchStdSource::Raw,
            eps_low: 0.2,
            eps_high: 0.2,
            aggregation: Aggregation::SequenceLevel,
            kl_coef: 0.0,
            overlong: false,
            overlong_exclude_stats: true,
            repeat_min_period: 1,
            repeat_min_repeats: 3,
            group_mode: GroupFilterMode::Off,
            refill_budget: 64,
            temperature: 0.99,
            top_k: 16,
            top_p: 0.99,
            max_new_tokens: 8,
            lenient: false,
            vocab_size: 16,
            context: 8,
            ngram_order: 4,
            ngram_scale: 4.0,
            warm_start_steps: 0,
            warm_start_lr: 0.1,
        };
        match preset {
            Preset::Vanilla => base,
            Preset::Grpo => Self {
                adv_norm: NormVariant::GroupMeanStd,
                ..base
            },
            Preset::DapoLite => Self {
                adv_norm: NormVariant::GroupMeanStd,
                aggregation: Aggregation::TokenLevel,
                eps_high: 0.28,
                overlong: true,
                group_mode: GroupFilterMode::Drop,
                ..base
            },
            Preset::LitePpo => Self {
                adv_norm: NormVariant::GroupMeanBatchStd,
                aggregation: Aggregation::TokenLevel,
                ..base
            },
        }
    }

    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "run.name" => self.name = value.to_string(),
            "run.preset" => self.preset = value.parse()?,
            "run.seed" => self.seed = p(key, value)?,
            "run.max_steps" => self.max_steps = p(key, value)?,
            "run.save_steps" => self.save_steps = p(key, value)?,
            "run.eval_steps" => self.eval_steps = p(key, value)?,
            "run.threads" => self.threads = p(key, value)?,
            "run.log_rollouts" => self.log_rollouts = p(key, value)?,
            "data.path" => self.data_path = value.to_string(),
            "data.heldout_frac" => self.heldout_frac = p(key, value)?,
            "rollout.batch_size" => self.batch_size = p(key, value)?,
            "rollout.group_size" => self.group_size = p(key, value)?,
            "train.minibatches" => self.minibatches = p(key, value)?,
            "train.ppo_epochs" => self.ppo_epochs = p(key, value)?,
            "optim.kind" => self.optim_kind = value.parse()?,
            "optim.lr" => self.lr = p(key, value)?,
            "optim.beta1" => self.beta1 = p(key, value)?,
            "optim.beta2" => self.beta2 = p(key, value)?,
            "optim.eps" => self.adam_eps = p(key, value)?,
            "adv.norm" => self.adv_norm = value.parse()?,
            "adv.reward_scale" => self.reward_scale = value.parse()?,
            "adv.eps" => self.adv_eps = p(key, value)?,
            "adv.batch_std_of" => self.batch_std_of = value.parse()?,
            "loss.eps_low" => self.eps_low = p(key, value)?,
            "loss.eps_high" => self.eps_high = p(key, value)?,
            "loss.agg" => self.aggregation = value.parse()?,
            "loss.kl_coef" => self.kl_coef = p(key, value)?,
            "filter.overlong" => self.overlong = p(key, value)?,
            "filter.overlong_exclude_stats" => self.overlong_exclude_stats = p(key, value)?,
            "filter.repeat_min_period" => self.repeat_min_period = p(key, value)?,
            "filter.repeat_min_repeats" => self.repeat_min_repeats = p(key, value)?,
            "filter.group_mode" => self.group_mode = value.parse()?,
            "filter.refill_budget" => self.refill_budget = p(key, value)?,
            "sampler.temperature" => self.temperature = p(key, value)?,
            "sampler.top_k" => self.top_k = p(key, value)?,
            "sampler.top_p" => self.top_p = p(key, value)?,
            "sampler.max_new_tokens" => self.max_new_tokens = p(key, value)?,
            "env.lenient" => self.lenient = p(key, value)?,
            "vocab.size" => self.vocab_size = p(key, value)?,
            "policy.context" => self.context = p(key, value)?,
            "policy.ngram_order" => self.ngram_order = p(key, value)?,
            "policy.ngram_scale" => self.ngram_scale = p(key, value)?,
            "policy.warm_start_steps" => self.warm_start_steps = p(key, value)?,
            "policy.warm_start_lr" => self.warm_start_lr = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &'static str, v: String| {
            m.insert(k, v);
        };
        put("run.name", self.name.clone());
        put("run.preset", self.preset.to_string());
        put("run.seed", self.seed.to_string());
        put("run.max_steps", self.max_steps.to_string());
        put("run.save_steps", self.save_steps.to_string());
        put("run.eval_steps", self.eval_steps.to_string());
        put("run.threads", self.threads.to_string());
        put("run.log_rollouts", self.log_rollouts.to_string());
        put("data.path", self.data_path.clone());
        put("data.heldout_frac", self.heldout_frac.to_string());
        put("rollout.batch_size", self.batch_size.to_string());
        put("rollout.group_size", self.group_size.to_string());
        put("train.minibatches", self.minibatches.to_string());
        put("train.ppo_epochs", self.ppo_epochs.to_string());
        put("optim.kind", self.optim_kind.to_string());
        put("optim.lr", self.lr.to_string());
        put("optim.beta1", self.beta1.to_string());
        put("optim.beta2", self.beta2.to_string());
        put("optim.eps", self.adam_eps.to_string());
        put("adv.norm", self.adv_norm.to_string());
        put("adv.reward_scale", self.reward_scale.to_string());
        put("adv.eps", self.adv_eps.to_string());
        put("adv.batch_std_of", self.batch_std_of.to_string());
        put("loss.eps_low", self.eps_low.to_string());
        put("loss.eps_high", self.eps_high.to_string());
        put("loss.agg", self.aggregation.to_string());
        put("loss.kl_coef", self.kl_coef.to_string());
        put("filter.overlong", self.overlong.to_string());
        put("filter.overlong_exclude_stats", self.overlong_exclude_stats.to_string());
        put("filter.repeat_min_period", self.repeat_min_period.to_string());
        put("filter.repeat_min_repeats", self.repeat_min_repeats.to_string());
        put("filter.group_mode", self.group_mode.to_string());
        put("filter.refill_budget", self.refill_budget.to_string());
        put("sampler.temperature", self.temperature.to_string());
        put("sampler.top_k", self.top_k.to_string());
        put("sampler.top_p", self.top_p.to_string());
        put("sampler.max_new_tokens", self.max_new_tokens.to_string());
        put("env.lenient", self.lenient.to_string());
        put("vocab.size", self.vocab_size.to_string());
        put("policy.context", self.context.to_string());
        put("policy.ngram_order", self.ngram_order.to_string());
        put("policy.ngram_scale", self.ngram_scale.to_string());
        put("policy.warm_start_steps", self.warm_start_steps.to_string());
        put("policy.warm_start_lr", self.warm_start_lr.to_string());
        m
    }

    /// The resolved configuration in the key/value grammar.
    pub fn to_kv_string(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Resolves `preset` (or the document's `run.preset`, or vanilla), then
    /// the document's entries, then `overrides`.
    pub fn resolve(
        preset: Option<Preset>,
        document: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let doc_preset = document
            .iter()
            .rev()
            .find(|(k, _)| k == "run.preset")
            .map(|(_, v)| v.parse::<Preset>())
            .transpose()?;
        let chosen = preset.or(doc_preset).unwrap_or(Preset::Vanilla);
        let mut cfg = Self::preset(chosen);
        let named = document.iter().chain(overrides).any(|(k, _)| k == "run.name");
        for (k, v) in document.iter().chain(overrides) {
            if k == "run.preset" {
                continue;
            }
            cfg.set(k, v)?;
        }
        if !named {
            cfg.name = chosen.to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return err("rollout.batch_size must be >= 1".into());
        }
        if self.group_size < 2 {
            return err("rollout.group_size must be >= 2".into());
        }
        if self.minibatches < 1 || !(self.batch_size * self.group_size).is_multiple_of(self.minibatches) {
            return err(format!(
                "train.minibatches ({}) must divide batch_size * group_size ({})",
                self.minibatches,
                self.batch_size * self.group_size
            ));
        }
        if self.ppo_epochs < 1 {
            return err("train.ppo_epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.heldout_frac) {
            return err("data.heldout_frac must be in [0, 1)".into());
        }
        if self.save_steps < 1 || self.eval_steps < 1 {
            return err("run.save_steps and run.eval_steps must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.warm_start_lr > 0.0) {
            return err("learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return err("optim.beta1/beta2 must be in [0, 1) and optim.eps > 0".into());
        }
        if self.name.is_empty() || self.name.contains(['\n', ',']) {
            return err("run.name must be non-empty and contain no commas or newlines".into());
        }
        let vocab = self.vocabulary()?;
        self.norm_strategy::<f64>()?;
        self.loss_config::<f64>()?;
        self.filter_config().validate()?;
        self.sampler::<f64>().validate(vocab.size())?;
        crate::policy::PolicyParams::<f32>::zeros(&vocab, self.context, 0)?;
        if !(self.ngram_scale > 0.0 && self.ngram_scale.is_finite()) {
            return err(format!("policy.ngram_scale must be > 0, got {}", self.ngram_scale));
        }
        if self.ngram_order > 0 {
            let rows = (vocab.size() as f64).powi(self.ngram_order as i32);
            if rows > crate::policy::MAX_NGRAM_ROWS as f64 {
                return err(format!("policy.ngram_order {} is too large", self.ngram_order));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab_size)
    }

    pub fn norm_strategy<T: Scalar>(&self) -> Result<NormStrategy<T>> {
        Ok(NormStrategy::new(self.adv_norm, T::lit(self.adv_eps))?.with_batch_std_source(self.batch_std_of))
    }

    pub fn loss_config<T: Scalar>(&self) -> Result<LossConfig<T>> {
        LossConfig::new(
            ClipConfig::new(T::lit(self.eps_low), T::lit(self.eps_high))?,
            self.aggregation,
            T::lit(self.kl_coef),
        )
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            overlong_enabled: self.overlong,
            overlong_exclude_stats: self.overlong_exclude_stats,
            repeat_min_period: self.repeat_min_period,
            repeat_min_repeats: self.repeat_min_repeats,
            group_filter_mode: self.group_mode,
            refill_budget: self.refill_budget,
        }
    }

    pub fn sampler<T: Scalar>(&self) -> SamplerConfig<T> {
        SamplerConfig {
            temperature: T::lit(self.temperature),
            top_k: self.top_k,
            top_p: T::lit(self.top_p),
            max_new_tokens: self.max_new_tokens,
        }
    }

    pub fn optimizer<T: Scalar>(&self) -> OptimizerConfig<T> {
        OptimizerConfig {
            kind: self.optim_kind,
            lr: T::lit(self.lr),
            beta1: T::lit(self.beta1),
            beta2: T::lit(self.beta2),
            eps: T::lit(self.adam_eps),
        }
    }
}

/// Parses the key/value grammar into ordered pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::Config(format!("line {}: bad key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
