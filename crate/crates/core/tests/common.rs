#![allow(dead_code)]

use rand::Rng;
use rltricks::rollout::{Response, RolloutBatch, RolloutGroup, TokenSeq};
use rltricks::vocab::{TokenId, Vocabulary};
use rltricks::Scalar;

pub fn vocab() -> Vocabulary {
    Vocabulary::default()
}

/// A batch whose response `i` of group `g` has the given reward and tokens.
pub fn batch(groups: &[Vec<(Vec<TokenId>, f64)>]) -> RolloutBatch<f64> {
    batch_as(groups)
}

pub fn batch_as<T: Scalar>(groups: &[Vec<(Vec<TokenId>, f64)>]) -> RolloutBatch<T> {
    let v = vocab();
    let groups = groups
        .iter()
        .map(|g| {
            let responses = g
                .iter()
                .map(|(toks, r)| {
                    let truncated = toks.last() != Some(&v.eos());
                    let lp = vec![T::lit(-0.5); toks.len()];
                    Response::new(TokenSeq::new(toks.clone(), &v).unwrap(), lp, T::lit(*r), truncated, &v).unwrap()
                })
                .collect();
            RolloutGroup::new(TokenSeq::new(vec![1, 10, 2, 13], &v).unwrap(), responses).unwrap()
        })
        .collect();
    RolloutBatch::new(groups, 0).unwrap()
}

pub fn reward_batch(rewards: &[Vec<f64>]) -> RolloutBatch<f64> {
    reward_batch_as(rewards)
}

pub fn reward_batch_as<T: Scalar>(rewards: &[Vec<f64>]) -> RolloutBatch<T> {
    let g: Vec<Vec<(Vec<TokenId>, f64)>> = rewards
        .iter()
        .map(|g| g.iter().map(|&r| (vec![3, 14], r)).collect())
        .collect();
    batch_as(&g)
}

/// Random binary rewards, shape `n x k`.
pub fn random_rewards(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..k).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Random response token sequence, EOS-terminated unless `truncated`.
pub fn random_tokens(rng: &mut impl Rng, len: usize, truncated: bool) -> Vec<TokenId> {
    let mut t: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..13)).collect();
    if !truncated {
        *t.last_mut().unwrap() = 14;
    }
    t
}
