//! Autoregressive softmax policy over the toy vocabulary.
//!
//! Logits are linear in the parameters:
//!
//! ```text
//! logits = b + sum_c W[c * V + ctx_c] + T[ngram(ctx)]
//! ```
//!
//! where `ctx` is the last `C` tokens of the history, left-padded with PAD,
//! `W` is the `(C * V) x V` position/token weight matrix and `T` is an optional
//! lookup table with one row per distinct tuple of the last `m` tokens
//! (`m = ngram_order`, `V^m` rows; disabled when `m = 0`). All gradients are
//! written out by hand.

use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::rollout::{Response, TokenSeq};
use crate::scalar::Scalar;
use crate::vocab::{TokenId, Vocabulary};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

/// Largest n-gram table, in rows.
pub const MAX_NGRAM_ROWS: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    vocab_size: usize,
    context: usize,
    ngram_order: usize,
    pad: TokenId,
    /// `(C * V) x V`, row-major.
    w: Vec<T>,
    b: Vec<T>,
    /// `V^m x V`, row-major; empty when the table is disabled.
    ngram: Vec<T>,
    /// Value of the active n-gram indicator feature.
    ngram_scale: T,
    version: u64,
}

/// Frozen parameters used as the KL reference.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot<T>(PolicyParams<T>);

impl<T: Scalar> ReferenceSnapshot<T> {
    pub fn new(params: &PolicyParams<T>) -> Self {
        Self(params.clone())
    }

    pub fn params(&self) -> &PolicyParams<T> {
        &self.0
    }
}

/// Active parameter rows for one history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Features {
    pub rows: Vec<usize>,
    pub ngram_row: Option<usize>,
}

impl<T: Scalar> PolicyParams<T> {
    /// All-zero parameters: the uniform policy.
    pub fn zeros(vocab: &Vocabulary, context: usize, ngram_order: usize) -> Result<Self> {
        let v = vocab.size();
        if context == 0 {
            return Err(Error::Config("policy.context must be >= 1".into()));
        }
        let rows = ngram_rows(v, ngram_order)?;
        Ok(Self {
            vocab_size: v,
            context,
            ngram_order,
            pad: vocab.pad(),
            w: vec![T::zero(); context * v * v],
            b: vec![T::zero(); v],
            ngram: vec![T::zero(); rows * v],
            ngram_scale: T::one(),
            version: 0,
        })
    }

    pub fn with_ngram_scale(mut self, scale: T) -> Result<Self> {
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::Config(format!("policy.ngram_scale must be > 0, got {scale}")));
        }
        self.ngram_scale = scale;
        Ok(self)
    }

    pub fn ngram_scale(&self) -> T {
        self.ngram_scale
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn ngram_order(&self) -> usize {
        self.ngram_order
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn w(&self) -> &[T] {
        &self.w
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn ngram(&self) -> &[T] {
        &self.ngram
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [T], &mut [T], &mut [T]) {
        (&mut self.w, &mut self.b, &mut self.ngram)
    }

    pub fn w_mut(&mut self) -> &mut [T] {
        &mut self.w
    }

    pub fn b_mut(&mut self) -> &mut [T] {
        &mut self.b
    }

    pub fn ngram_mut(&mut self) -> &mut [T] {
        &mut self.ngram
    }

    /// Parameter rows selected by the last `C` (and last `m`) history tokens.
    pub fn features(&self, history: &[TokenId]) -> Features {
        let v = self.vocab_size;
        let c = self.context;
        let rows = (0..c)
            .map(|pos| {
                // pos C-1 holds the most recent token
                let back = c - pos;
                let tok = if back <= history.len() {
                    history[history.len() - back]
                } else {
                    self.pad
                };
                pos * v + tok as usize
            })
            .collect();
        let ngram_row = (self.ngram_order > 0).then(|| {
            let m = self.ngram_order;
            (0..m).fold(0usize, |acc, j| {
                let back = m - j;
                let tok = if back <= history.len() {
                    history[history.len() - back]
                } else {
                    self.pad
                };
                acc * v + tok as usize
            })
        });
        Features { rows, ngram_row }
    }

    pub fn logits_for(&self, features: &Features) -> Vec<T> {
        let v = self.vocab_size;
        let mut out = self.b.clone();
        for &r in &features.rows {
            for (o, &w) in out.iter_mut().zip(&self.w[r * v..(r + 1) * v]) {
                *o = *o + w;
            }
        }
        if let Some(r) = features.ngram_row {
            for (o, &w) in out.iter_mut().zip(&self.ngram[r * v..(r + 1) * v]) {
                *o = *o + self.ngram_scale * w;
            }
        }
        out
    }

    /// Vocabulary logits for the next token after `history`.
    pub fn logits(&self, history: &[TokenId]) -> Vec<T> {
        self.logits_for(&self.features(history))
    }

    pub fn log_probs(&self, history: &[TokenId], temperature: T) -> Vec<T> {
        log_softmax(&self.logits(history), temperature)
    }

    /// Accumulates `dlogits` into `grad` through the linear map at `features`.
    pub fn backprop_logits(&self, features: &Features, dlogits: &[T], grad: &mut Gradient<T>) {
        let v = self.vocab_size;
        for &r in &features.rows {
            for (g, &d) in grad.w[r * v..(r + 1) * v].iter_mut().zip(dlogits) {
                *g = *g + d;
            }
        }
        for (g, &d) in grad.b.iter_mut().zip(dlogits) {
            *g = *g + d;
        }
        if let Some(r) = features.ngram_row {
            let row = grad.ngram.entry(r).or_insert_with(|| vec![T::zero(); v]);
            for (g, &d) in row.iter_mut().zip(dlogits) {
                *g = *g + self.ngram_scale * d;
            }
        }
    }

    /// Gradient of `ln pi(token | history)` with respect to every parameter.
    pub fn grad_logprob(&self, history: &[TokenId], token: TokenId, temperature: T) -> Gradient<T> {
        let features = self.features(history);
        let lp = log_softmax(&self.logits_for(&features), temperature);
        let dz = logprob_logit_grad(&lp, token, temperature);
        let mut g = Gradient::zeros_like(self);
        self.backprop_logits(&features, &dz, &mut g);
        g
    }

    /// Stable hash of every parameter bit pattern and the version.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.version.hash(&mut h);
        for x in self.w.iter().chain(&self.b).chain(&self.ngram) {
            x.as_f64().to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).chain(&self.ngram).all(|x| x.is_finite())
    }
}

fn ngram_rows(v: usize, order: usize) -> Result<usize> {
    if order == 0 {
        return Ok(0);
    }
    let mut rows: usize = 1;
    for _ in 0..order {
        rows = rows
            .checked_mul(v)
            .filter(|&r| r <= MAX_NGRAM_ROWS)
            .ok_or_else(|| {
                Error::Config(format!(
                    "policy.ngram_order {order} needs more than {MAX_NGRAM_ROWS} rows at V = {v}"
                ))
            })?;
    }
    Ok(rows)
}

/// Numerically stable `log softmax(logits / temperature)`.
pub fn log_softmax<T: Scalar>(logits: &[T], temperature: T) -> Vec<T> {
    debug_assert!(temperature > T::zero());
    let scaled: Vec<T> = logits.iter().map(|&z| z / temperature).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + scaled.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    scaled.iter().map(|&z| z - lse).collect()
}

pub fn softmax<T: Scalar>(logits: &[T], temperature: T) -> Vec<T> {
    log_softmax(logits, temperature).into_iter().map(T::exp).collect()
}

/// `d ln pi(token) / d logits = (onehot(token) - p) / temperature`.
pub fn logprob_logit_grad<T: Scalar>(log_probs: &[T], token: TokenId, temperature: T) -> Vec<T> {
    log_probs
        .iter()
        .enumerate()
        .map(|(j, &lp)| {
            let hot = if j == token as usize { T::one() } else { T::zero() };
            (hot - lp.exp()) / temperature
        })
        .collect()
}

/// Categorical entropy from log-probabilities.
pub fn entropy_of<T: Scalar>(log_probs: &[T]) -> T {
    -log_probs
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > T::zero() {
                p * lp
            } else {
                T::zero()
            }
        })
        .sum::<T>()
}

/// `KL(p || q)` from log-probabilities together with its logit gradient
/// `d KL / d z_j = p_j (ln p_j - ln q_j - KL) / temperature` (gradient taken
/// through `p` only; `q` is frozen).
pub fn kl_with_logit_grad<T: Scalar>(
    log_p: &[T],
    log_q: &[T],
    temperature: T,
) -> (T, Vec<T>) {
    let kl = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<T>()
        .max(T::zero());
    let grad = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq - kl) / temperature)
        .collect();
    (kl, grad)
}

/// Mean entropy of the policy over the supplied histories.
pub fn entropy<T: Scalar>(params: &PolicyParams<T>, histories: &[Vec<TokenId>], temperature: T) -> T {
    if histories.is_empty() {
        return T::zero();
    }
    let total = histories
        .iter()
        .map(|h| entropy_of(&params.log_probs(h, temperature)))
        .sum::<T>();
    total / T::from_usize_lossy(histories.len())
}

/// Gradient with the shape of [`PolicyParams`]; n-gram rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub ngram: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros_like(params: &PolicyParams<T>) -> Self {
        Self {
            w: vec![T::zero(); params.w.len()],
            b: vec![T::zero(); params.b.len()],
            ngram: BTreeMap::new(),
        }
    }

    pub fn scale(&mut self, s: T) {
        self.w.iter_mut().for_each(|x| *x = *x * s);
        self.b.iter_mut().for_each(|x| *x = *x * s);
        self.ngram.values_mut().flatten().for_each(|x| *x = *x * s);
    }

    pub fn add(&mut self, other: &Gradient<T>) {
        for (a, &b) in self.w.iter_mut().zip(&other.w) {
            *a = *a + b;
        }
        for (a, &b) in self.b.iter_mut().zip(&other.b) {
            *a = *a + b;
        }
        for (r, row) in &other.ngram {
            let dst = self.ngram.entry(*r).or_insert_with(|| vec![T::zero(); row.len()]);
            for (a, &b) in dst.iter_mut().zip(row) {
                *a = *a + b;
            }
        }
    }

    /// `sqrt(sum g^2)` over every component, summed in storage order.
    pub fn norm(&self) -> T {
        self.w
            .iter()
            .chain(&self.b)
            .chain(self.ngram.values().flatten())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Dense n-gram entry, zero when the row was never touched.
    pub fn ngram_at(&self, row: usize, col: usize) -> T {
        self.ngram.get(&row).map_or(T::zero(), |r| r[col])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig<T> {
    pub temperature: T,
    pub top_k: usize,
    pub top_p: T,
    pub max_new_tokens: usize,
}

impl<T: Scalar> SamplerConfig<T> {
    /// Desk-scale defaults for a vocabulary of size `vocab_size`.
    pub fn desk_default(vocab_size: usize) -> Self {
        Self {
            temperature: T::lit(0.99),
            top_k: vocab_size,
            top_p: T::lit(0.99),
            max_new_tokens: 8,
        }
    }

    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: T::one(),
            top_k: 1,
            top_p: T::one(),
            max_new_tokens,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > T::zero()) || !self.temperature.is_finite() {
            return Err(Error::Config("sampler.temperature must be > 0".into()));
        }
        if self.top_k < 1 || self.top_k > vocab_size {
            return Err(Error::Config(format!("sampler.top_k must be in [1, {vocab_size}]")));
        }
        if !(self.top_p > T::zero() && self.top_p <= T::one()) {
            return Err(Error::Config("sampler.top_p must be in (0, 1]".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(Error::Config("sampler.max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Token ids that survive top-k then top-p, most probable first (ties by id).
pub fn truncated_support<T: Scalar>(probs: &[T], top_k: usize, top_p: T) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    let mut cum = T::zero();
    let mut keep = 0;
    for &i in &order {
        cum = cum + probs[i];
        keep += 1;
        if cum >= top_p {
            break;
        }
    }
    order.truncate(keep);
    order
}

/// Draws one token id from the top-k/top-p truncated distribution.
pub fn sample_token<T: Scalar, R: Rng + ?Sized>(probs: &[T], sampler: &SamplerConfig<T>, rng: &mut R) -> usize {
    let support = truncated_support(probs, sampler.top_k, sampler.top_p);
    if support.len() == 1 {
        return support[0];
    }
    let mass = support.iter().map(|&i| probs[i]).sum::<T>();
    let u = T::lit(rng.gen::<f64>()) * mass;
    let mut cum = T::zero();
    for &i in &support {
        cum = cum + probs[i];
        if u < cum {
            return i;
        }
    }
    *support.last().unwrap()
}

/// A sampled response and the entropy of the sampling distribution at each step.
#[derive(Debug, Clone)]
pub struct Sampled<T> {
    pub response: Response<T>,
    pub step_entropy: Vec<T>,
}

/// Samples autoregressively until EOS or `max_new_tokens`. Behavior log-probs
/// are taken from the full tempered softmax, not the truncated one. The reward
/// is left at zero for the verifier to fill in.
pub fn sample_response<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    prompt: &[TokenId],
    sampler: &SamplerConfig<T>,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Sampled<T> {
    let mut history = prompt.to_vec();
    let mut tokens = Vec::with_capacity(sampler.max_new_tokens);
    let mut logprobs = Vec::with_capacity(sampler.max_new_tokens);
    let mut step_entropy = Vec::with_capacity(sampler.max_new_tokens);
    let eos = vocab.eos();
    let mut finished = false;
    while tokens.len() < sampler.max_new_tokens {
        let lp = params.log_probs(&history, sampler.temperature);
        let probs: Vec<T> = lp.iter().map(|x| x.exp()).collect();
        let tok = sample_token(&probs, sampler, rng) as TokenId;
        step_entropy.push(entropy_of(&lp));
        tokens.push(tok);
        logprobs.push(lp[tok as usize]);
        history.push(tok);
        if tok == eos {
            finished = true;
            break;
        }
    }
    let seq = TokenSeq::new(tokens, vocab).expect("sampled ids lie in the vocabulary");
    let response = Response::new(seq, logprobs, T::zero(), !finished, vocab)
        .expect("sampled response satisfies invariants");
    Sampled {
        response,
        step_entropy,
    }
}

/// Log-probabilities of `response` under `params`, one per token.
pub fn response_logprobs<T: Scalar>(
    params: &PolicyParams<T>,
    prompt: &[TokenId],
    response: &[TokenId],
    temperature: T,
) -> Vec<T> {
    let mut history = prompt.to_vec();
    response
        .iter()
        .map(|&tok| {
            let lp = params.log_probs(&history, temperature)[tok as usize];
            history.push(tok);
            lp
        })
        .collect()
}

/// A prompt and the exact continuation the policy should produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Maximum-likelihood warm start: `steps` full-batch optimizer steps on the
/// mean token log-likelihood of the demonstrations. Produces a low-entropy
/// starting policy. Returns the final mean negative log-likelihood.
pub fn warm_start<T: Scalar>(
    params: &mut PolicyParams<T>,
    demos: &[Demonstration],
    steps: usize,
    optimizer: &mut Optimizer<T>,
    temperature: T,
) -> Result<T> {
    let count: usize = demos.iter().map(|d| d.target.len()).sum();
    if count == 0 {
        return Ok(T::zero());
    }
    let inv = T::one() / T::from_usize_lossy(count);
    let mut nll = T::zero();
    for _ in 0..steps {
        let mut grad = Gradient::zeros_like(params);
        nll = T::zero();
        for d in demos {
            let mut history = d.prompt.clone();
            for &tok in &d.target {
                let f = params.features(&history);
                let lp = log_softmax(&params.logits_for(&f), temperature);
                nll = nll - lp[tok as usize] * inv;
                // minimize NLL: gradient is -d ln pi
                let dz: Vec<T> = logprob_logit_grad(&lp, tok, temperature)
                    .into_iter()
                    .map(|g| -g * inv)
                    .collect();
                params.backprop_logits(&f, &dz, &mut grad);
                history.push(tok);
            }
        }
        optimizer.step(params, &grad)?;
    }
    Ok(nll)
}

/// On-disk checkpoint layout (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub vocab_size: usize,
    pub context: usize,
    pub ngram_order: usize,
    #[serde(default = "unit_scale")]
    pub ngram_scale: f64,
    pub pad: TokenId,
    pub version: u64,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Only rows with at least one nonzero entry, ascending by index.
    pub ngram_rows: Vec<(usize, Vec<f64>)>,
    pub rng: RngState,
}

/// Position of the run's derived random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub iteration: u64,
}

fn unit_scale() -> f64 {
    1.0
}

pub const CHECKPOINT_FORMAT: &str = "rltricks-checkpoint/1";

impl<T: Scalar> PolicyParams<T> {
    pub fn to_checkpoint(&self, rng: RngState) -> Checkpoint {
        let v = self.vocab_size;
        let ngram_rows = self
            .ngram
            .chunks(v)
            .enumerate()
            .filter(|(_, row)| row.iter().any(|x| *x != T::zero()))
            .map(|(i, row)| (i, row.iter().map(|x| x.as_f64()).collect()))
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            vocab_size: v,
            context: self.context,
            ngram_order: self.ngram_order,
            ngram_scale: self.ngram_scale.as_f64(),
            pad: self.pad,
            version: self.version,
            w: self.w.iter().map(|x| x.as_f64()).collect(),
            b: self.b.iter().map(|x| x.as_f64()).collect(),
            ngram_rows,
            rng,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        let v = ck.vocab_size;
        let rows = ngram_rows(v, ck.ngram_order)?;
        if ck.w.len() != ck.context * v * v || ck.b.len() != v {
            return Err(Error::Checkpoint("weight shapes do not match header".into()));
        }
        let mut ngram = vec![T::zero(); rows * v];
        for (r, row) in &ck.ngram_rows {
            if *r >= rows || row.len() != v {
                return Err(Error::Checkpoint(format!("bad n-gram row {r}")));
            }
            for (dst, &x) in ngram[r * v..(r + 1) * v].iter_mut().zip(row) {
                *dst = T::lit(x);
            }
        }
        Self {
            vocab_size: v,
            context: ck.context,
            ngram_order: ck.ngram_order,
            pad: ck.pad,
            w: ck.w.iter().map(|&x| T::lit(x)).collect(),
            b: ck.b.iter().map(|&x| T::lit(x)).collect(),
            ngram,
            ngram_scale: T::one(),
            version: ck.version,
        }
        .with_ngram_scale(T::lit(ck.ngram_scale))
        .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
