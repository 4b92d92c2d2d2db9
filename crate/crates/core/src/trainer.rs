//! The iteration engine: rollout, reward scaling, filtering, normalization,
//! sequential minibatch updates and metrics.

use crate::advantage::{apply_reward_scale, compute_advantages_masked};
use crate::config::TrainConfig;
use crate::env::{ArithmeticTask, Verifier};
use crate::error::{Error, Result};
use crate::filters::{group_filter, overlong_mask, repeat_ratio, FilterConfig};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::policy::{
    kl_with_logit_grad, log_softmax, logprob_logit_grad, sample_response, warm_start, Demonstration,
    Features, Gradient, PolicyParams, ReferenceSnapshot, SamplerConfig,
};
use crate::rng::{stream, PURPOSE_MINIBATCH, PURPOSE_REFILL, PURPOSE_ROLLOUT, PURPOSE_SHUFFLE, PURPOSE_SPLIT};
use crate::rollout::{flatten_rewards, LossMask, Response, RolloutBatch, RolloutGroup, TokenSeq};
use crate::scalar::{mean_std, Scalar};
use crate::surrogate::{surrogate_over, ClipDirection, LossConfig, TrajectoryTerms};
use crate::vocab::{TokenId, Vocabulary};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub train_acc: f64,
    pub mean_len: f64,
    pub entropy: f64,
    pub clip_frac_high: f64,
    pub clip_frac_low: f64,
    pub grad_norm: f64,
    pub repeat_ratio: f64,
    pub degenerate_group_frac: f64,
    pub reward_std_batch: f64,
    pub loss: f64,
}

/// One line of `clip_events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEventRecord {
    pub iter: u64,
    pub token: TokenId,
    pub dir: ClipDirection,
    pub ratio: f64,
}

/// One line of `eval.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: u64,
    pub accuracy: f64,
    pub mean_len: f64,
}

#[derive(Debug, Clone)]
pub struct IterationOutput<T> {
    pub metrics: MetricsRecord,
    pub clip_events: Vec<ClipEventRecord>,
    /// The batch as sampled, with raw rewards.
    pub rollouts: RolloutBatch<T>,
    pub diagnostics: Vec<String>,
    /// True when filtering removed every group and no update happened.
    pub skipped: bool,
    /// Largest `|new - behavior|` log-prob gap on the first minibatch; zero
    /// whenever the behavior snapshot discipline holds.
    pub first_minibatch_max_log_ratio: f64,
    /// Number of optimizer steps taken.
    pub updates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_len: f64,
}

/// Greedy-decoding accuracy and mean response length. Side-effect free.
pub fn evaluate<T: Scalar>(
    params: &PolicyParams<T>,
    tasks: &[ArithmeticTask],
    vocab: &Vocabulary,
    verifier: Verifier,
    max_new_tokens: usize,
) -> EvalResult {
    if tasks.is_empty() {
        return EvalResult {
            accuracy: 0.0,
            mean_len: 0.0,
        };
    }
    let greedy = SamplerConfig::<T>::greedy(max_new_tokens);
    let results: Vec<(u8, usize)> = tasks
        .par_iter()
        .map(|t| {
            // greedy decoding never consumes randomness
            let mut rng = stream(0, &[]);
            let s = sample_response(params, &t.prompt_ids(vocab), &greedy, vocab, &mut rng);
            (verifier.verify(t, s.response.tokens().ids(), vocab), s.response.len())
        })
        .collect();
    let n = tasks.len() as f64;
    EvalResult {
        accuracy: results.iter().map(|r| r.0 as f64).sum::<f64>() / n,
        mean_len: results.iter().map(|r| r.1 as f64).sum::<f64>() / n,
    }
}

/// Splits task indices into (train, heldout) with a seeded permutation.
pub fn split_dataset(n: usize, heldout_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[PURPOSE_SPLIT]));
    let held = ((n as f64) * heldout_frac).floor() as usize;
    let held = held.min(n.saturating_sub(1));
    let mut heldout = idx[..held].to_vec();
    let mut train = idx[held..].to_vec();
    heldout.sort_unstable();
    train.sort_unstable();
    (train, heldout)
}

/// Prompt order: shuffled per epoch, drawn without replacement within an epoch.
#[derive(Debug, Clone)]
struct PromptStream {
    seed: u64,
    len: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl PromptStream {
    fn new(seed: u64, len: usize) -> Self {
        let mut s = Self {
            seed,
            len,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut stream(self.seed, &[PURPOSE_SHUFFLE, self.epoch]));
        self.cursor = 0;
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Samples `k` responses for one task and scores them.
fn rollout_group<T: Scalar>(
    params: &PolicyParams<T>,
    task: &ArithmeticTask,
    k: usize,
    sampler: &SamplerConfig<T>,
    verifier: Verifier,
    vocab: &Vocabulary,
    rng: &mut crate::rng::StreamRng,
) -> (RolloutGroup<T>, Vec<T>) {
    let prompt = task.prompt_ids(vocab);
    let mut entropies = Vec::new();
    let responses = (0..k)
        .map(|_| {
            let s = sample_response(params, &prompt, sampler, vocab, rng);
            entropies.extend(s.step_entropy);
            let reward = verifier.verify(task, s.response.tokens().ids(), vocab);
            s.response.with_reward(T::from_u8(reward).expect("0 or 1"))
        })
        .collect::<Vec<Response<T>>>();
    let prompt = TokenSeq::new(prompt, vocab).expect("prompt ids lie in the vocabulary");
    (RolloutGroup::new(prompt, responses).expect("group size >= 2"), entropies)
}

/// Cached forward pass for one generated token.
struct TokenForward<T> {
    features: Features,
    log_probs: Vec<T>,
    kl: T,
    kl_grad: Vec<T>,
}

pub struct Trainer<T> {
    config: TrainConfig,
    vocab: Vocabulary,
    verifier: Verifier,
    sampler: SamplerConfig<T>,
    loss: LossConfig<T>,
    filters: FilterConfig,
    train: Vec<ArithmeticTask>,
    heldout: Vec<ArithmeticTask>,
    params: PolicyParams<T>,
    reference: ReferenceSnapshot<T>,
    optimizer: Optimizer<T>,
    prompts: PromptStream,
    iteration: u64,
    pool: rayon::ThreadPool,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the trainer, partitions the dataset and applies the optional
    /// maximum-likelihood warm start.
    pub fn new(config: TrainConfig, tasks: Vec<ArithmeticTask>) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::Dataset("no tasks".into()));
        }
        let vocab = config.vocabulary()?;
        let (train_idx, held_idx) = split_dataset(tasks.len(), config.heldout_frac, config.seed);
        let train: Vec<_> = train_idx.iter().map(|&i| tasks[i].clone()).collect();
        let heldout: Vec<_> = held_idx.iter().map(|&i| tasks[i].clone()).collect();

        let mut params = PolicyParams::zeros(&vocab, config.context, config.ngram_order)?
            .with_ngram_scale(T::lit(config.ngram_scale))?;
        let temperature = T::lit(config.temperature);
        if config.warm_start_steps > 0 {
            let demos: Vec<Demonstration> = train
                .iter()
                .map(|t| Demonstration {
                    prompt: t.prompt_ids(&vocab),
                    target: t.canonical_response(&vocab),
                })
                .collect();
            let mut opt = Optimizer::new(
                OptimizerConfig {
                    lr: T::lit(config.warm_start_lr),
                    ..config.optimizer()
                },
                &params,
            );
            warm_start(&mut params, &demos, config.warm_start_steps, &mut opt, temperature)?;
        }
        let reference = ReferenceSnapshot::new(&params);
        let optimizer = Optimizer::new(config.optimizer(), &params);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            vocab,
            verifier: Verifier {
                lenient: config.lenient,
            },
            sampler: config.sampler(),
            loss: config.loss_config()?,
            filters: config.filter_config(),
            prompts: PromptStream::new(config.seed, train.len()),
            train,
            heldout,
            params,
            reference,
            optimizer,
            iteration: 0,
            pool,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &PolicyParams<T> {
        &self.params
    }

    pub fn reference(&self) -> &ReferenceSnapshot<T> {
        &self.reference
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn train_tasks(&self) -> &[ArithmeticTask] {
        &self.train
    }

    pub fn heldout_tasks(&self) -> &[ArithmeticTask] {
        &self.heldout
    }

    pub fn evaluate_heldout(&self) -> Option<EvalResult> {
        (!self.heldout.is_empty()).then(|| {
            evaluate(
                &self.params,
                &self.heldout,
                &self.vocab,
                self.verifier,
                self.config.max_new_tokens,
            )
        })
    }

    /// Runs one full iteration.
    pub fn run_iteration(&mut self) -> Result<IterationOutput<T>> {
        let cfg = &self.config;
        let iter = self.iteration;
        let n = cfg.batch_size;
        let k = cfg.group_size;
        let seed = cfg.seed;

        // Rollout from the frozen behavior snapshot.
        let task_ids: Vec<usize> = (0..n).map(|_| self.prompts.next_index()).collect();
        let behavior = &self.params;
        let (sampler, verifier, vocab, train) = (&self.sampler, self.verifier, &self.vocab, &self.train);
        let sampled: Vec<(RolloutGroup<T>, Vec<T>)> = self.pool.install(|| {
            task_ids
                .par_iter()
                .enumerate()
                .map(|(slot, &ti)| {
                    let mut rng = stream(seed, &[PURPOSE_ROLLOUT, iter, slot as u64]);
                    rollout_group(behavior, &train[ti], k, sampler, verifier, vocab, &mut rng)
                })
                .collect()
        });
        let mut entropy_sum = T::zero();
        let mut entropy_n = 0usize;
        let mut groups = Vec::with_capacity(n);
        for (g, e) in sampled {
            entropy_n += e.len();
            entropy_sum = entropy_sum + e.into_iter().sum::<T>();
            groups.push(g);
        }
        let raw = RolloutBatch::new(groups, behavior.version())?;
        let raw_rewards = flatten_rewards(&raw);
        let train_acc = raw_rewards.iter().map(|r| r.as_f64()).sum::<f64>() / raw_rewards.len() as f64;
        let mean_len = raw.responses().map(|r| r.len() as f64).sum::<f64>() / raw.num_trajectories() as f64;
        let entropy = if entropy_n == 0 {
            0.0
        } else {
            (entropy_sum / T::from_usize_lossy(entropy_n)).as_f64()
        };
        let scaled_all = apply_reward_scale(&raw, cfg.reward_scale)?;
        let reward_std_batch = mean_std(&flatten_rewards(&scaled_all)).1.as_f64();
        let repeat = repeat_ratio(&raw, &self.filters);

        // Group filter, refilling from the prompt stream when configured.
        let prompts = &mut self.prompts;
        let refill = |attempt: usize| {
            let ti = prompts.next_index();
            let mut rng = stream(seed, &[PURPOSE_REFILL, iter, attempt as u64]);
            rollout_group(behavior, &train[ti], k, sampler, verifier, vocab, &mut rng).0
        };
        let outcome = group_filter(&raw, &self.filters, refill);
        let mut diagnostics = outcome.report.diagnostics.clone();

        let mut out = IterationOutput {
            metrics: MetricsRecord {
                iter,
                train_acc,
                mean_len,
                entropy,
                clip_frac_high: 0.0,
                clip_frac_low: 0.0,
                grad_norm: 0.0,
                repeat_ratio: repeat,
                degenerate_group_frac: 0.0,
                reward_std_batch,
                loss: 0.0,
            },
            clip_events: Vec::new(),
            rollouts: raw.clone(),
            diagnostics: Vec::new(),
            skipped: false,
            first_minibatch_max_log_ratio: 0.0,
            updates: 0,
        };

        let Some(kept) = outcome.batch else {
            out.skipped = true;
            out.diagnostics = diagnostics;
            self.iteration += 1;
            return Ok(out);
        };

        // Scale, mask, normalize.
        let scaled = apply_reward_scale(&kept, cfg.reward_scale)?;
        let mask = if self.filters.overlong_enabled {
            overlong_mask(&scaled).0
        } else {
            LossMask::ones(&scaled)
        };
        let include: Vec<bool> = scaled.responses().map(|r| self.filters.in_stats(r)).collect();
        let strategy = cfg.norm_strategy::<T>()?;
        let adv = compute_advantages_masked(
            &scaled,
            &strategy,
            include.iter().any(|x| !x).then_some(include.as_slice()),
        );
        out.metrics.degenerate_group_frac = adv.degenerate_groups.len() as f64 / scaled.num_groups() as f64;

        // Sequential minibatch updates against the fixed behavior log-probs.
        let traj: Vec<(&[TokenId], &Response<T>)> = scaled
            .groups()
            .iter()
            .flat_map(|g| g.responses().iter().map(move |r| (g.prompt().ids(), r)))
            .collect();
        let m = cfg.minibatches.min(traj.len());
        let temperature = self.sampler.temperature;
        let kl_on = self.loss.kl_coef() > T::zero();
        let (mut upper, mut lower, mut active) = (0usize, 0usize, 0usize);
        let mut losses = Vec::new();
        let mut first = true;
        for epoch in 0..cfg.ppo_epochs {
            let mut order: Vec<usize> = (0..traj.len()).collect();
            order.shuffle(&mut stream(seed, &[PURPOSE_MINIBATCH, iter, epoch as u64]));
            let base = traj.len() / m;
            let extra = traj.len() % m;
            let mut start = 0;
            for c in 0..m {
                let size = base + usize::from(c < extra);
                let chunk = &order[start..start + size];
                start += size;

                let forwards: Vec<Vec<TokenForward<T>>> = chunk
                    .iter()
                    .map(|&i| {
                        let (prompt, r) = traj[i];
                        let mut history = prompt.to_vec();
                        r.tokens()
                            .ids()
                            .iter()
                            .map(|&tok| {
                                let features = self.params.features(&history);
                                let log_probs = log_softmax(&self.params.logits_for(&features), temperature);
                                let (kl, kl_grad) = if kl_on {
                                    let lq = self.reference.params().log_probs(&history, temperature);
                                    kl_with_logit_grad(&log_probs, &lq, temperature)
                                } else {
                                    (T::zero(), Vec::new())
                                };
                                history.push(tok);
                                TokenForward {
                                    features,
                                    log_probs,
                                    kl,
                                    kl_grad,
                                }
                            })
                            .collect()
                    })
                    .collect();
                let new_lp: Vec<Vec<T>> = chunk
                    .iter()
                    .zip(&forwards)
                    .map(|(&i, f)| {
                        let ids = traj[i].1.tokens().ids();
                        f.iter().zip(ids).map(|(tf, &tok)| tf.log_probs[tok as usize]).collect()
                    })
                    .collect();
                let kls: Vec<Vec<T>> = forwards.iter().map(|f| f.iter().map(|t| t.kl).collect()).collect();
                let terms: Vec<TrajectoryTerms<'_, T>> = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| TrajectoryTerms {
                        tokens: traj[i].1.tokens().ids(),
                        behavior_logprobs: traj[i].1.behavior_logprobs(),
                        new_logprobs: &new_lp[j],
                        advantages: &adv.tokens[i],
                        mask: mask.row(i),
                        kl: kl_on.then_some(kls[j].as_slice()),
                    })
                    .collect();
                let sur = surrogate_over(&terms, &self.loss);
                if first {
                    out.first_minibatch_max_log_ratio = sur.diagnostics.max_abs_log_ratio.as_f64();
                    first = false;
                }
                for e in &sur.events.events {
                    out.clip_events.push(ClipEventRecord {
                        iter,
                        token: e.token,
                        dir: e.direction,
                        ratio: e.ratio.as_f64(),
                    });
                }
                upper += sur.events.upper();
                lower += sur.events.lower();
                active += sur.diagnostics.active_tokens;
                if sur.diagnostics.all_masked {
                    diagnostics.push(format!("minibatch {c}: every token masked; update skipped"));
                    continue;
                }
                losses.push(sur.loss);

                let mut grad = Gradient::zeros_like(&self.params);
                for (j, &i) in chunk.iter().enumerate() {
                    let ids = traj[i].1.tokens().ids();
                    for (t, tf) in forwards[j].iter().enumerate() {
                        let g_lp = sur.grad_new_logprob[j][t];
                        let g_kl = sur.grad_kl[j][t];
                        if g_lp == T::zero() && g_kl == T::zero() {
                            continue;
                        }
                        let mut dz = logprob_logit_grad(&tf.log_probs, ids[t], temperature);
                        dz.iter_mut().for_each(|d| *d = *d * g_lp);
                        if kl_on {
                            for (d, &kg) in dz.iter_mut().zip(&tf.kl_grad) {
                                *d = *d + g_kl * kg;
                            }
                        }
                        self.params.backprop_logits(&tf.features, &dz, &mut grad);
                    }
                }
                let norm = self.optimizer.step(&mut self.params, &grad)?;
                out.metrics.grad_norm = out.metrics.grad_norm.max(norm.as_f64());
                out.updates += 1;
            }
        }
        if active > 0 {
            out.metrics.clip_frac_high = upper as f64 / active as f64;
            out.metrics.clip_frac_low = lower as f64 / active as f64;
        }
        if !losses.is_empty() {
            out.metrics.loss = (losses.iter().copied().sum::<T>() / T::from_usize_lossy(losses.len())).as_f64();
        }
        out.diagnostics = diagnostics;
        self.iteration += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::env::{gen_dataset, DifficultyTier};

    fn small(preset: Preset) -> TrainConfig {
        let mut c = TrainConfig::preset(preset);
        c.batch_size = 8;
        c.group_size = 4;
        c.minibatches = 2;
        c.max_steps = 3;
        c
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (a, b) = split_dataset(100, 0.1, 3);
        assert_eq!(b.len(), 10);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_dataset(100, 0.1, 3), (a, b));
        assert_eq!(split_dataset(1, 0.5, 3).0.len(), 1);
    }

    #[test]
    fn prompt_stream_covers_epoch_without_replacement() {
        let mut s = PromptStream::new(1, 10);
        let mut seen: Vec<usize> = (0..10).map(|_| s.next_index()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        s.next_index();
        assert_eq!(s.epoch, 1);
    }

    #[test]
    fn single_minibatch_has_unit_ratios() {
        let mut cfg = small(Preset::DapoLite);
        cfg.minibatches = 1;
        cfg.group_mode = crate::filters::GroupFilterMode::Off;
        let tasks = gen_dataset(DifficultyTier::Easy, 50, 1).unwrap();
        let mut t = Trainer::<f64>::new(cfg, tasks).unwrap();
        for _ in 0..3 {
            let out = t.run_iteration().unwrap();
            assert_eq!(out.first_minibatch_max_log_ratio, 0.0);
            assert!(out.clip_events.is_empty());
            assert_eq!(out.metrics.clip_frac_high, 0.0);
        }
    }

    #[test]
    fn later_minibatches_see_moved_ratios() {
        let cfg = small(Preset::Grpo);
        let tasks = gen_dataset(DifficultyTier::Easy, 50, 1).unwrap();
        let mut t = Trainer::<f64>::new(cfg, tasks).unwrap();
        let out = t.run_iteration().unwrap();
        assert_eq!(out.first_minibatch_max_log_ratio, 0.0);
        assert_eq!(out.updates, 2);
        assert_eq!(t.params().version(), 2);
    }

    #[test]
    fn evaluation_is_side_effect_free() {
        let cfg = small(Preset::LitePpo);
        let tasks = gen_dataset(DifficultyTier::Easy, 50, 1).unwrap();
        let mut t = Trainer::<f64>::new(cfg, tasks).unwrap();
        t.run_iteration().unwrap();
        let before = t.params().fingerprint();
        t.evaluate_heldout().unwrap();
        assert_eq!(before, t.params().fingerprint());
    }
}
