mod common;

use common::{batch, random_tokens};
use proptest::prelude::*;
use rand::Rng;
use rltricks::advantage::{compute_advantages_masked, NormStrategy, NormVariant};
use rltricks::filters::{
    detect_repeat, group_filter, overlong_mask, repeat_ratio, FilterConfig, GroupFilterMode,
};
use rltricks::rng::stream;
use rltricks::rollout::RolloutGroup;
use rltricks::vocab::TokenId;

/// Cubic scan: for every allowed period, compare each of the trailing blocks
/// against the final block element by element.
fn brute_force(tokens: &[TokenId], min_period: usize, min_repeats: usize) -> bool {
    let n = tokens.len();
    for p in min_period.max(1)..=n {
        if p * min_repeats > n {
            break;
        }
        let last = &tokens[n - p..];
        let mut all = true;
        for copy in 0..min_repeats {
            let start = n - (copy + 1) * p;
            for j in 0..p {
                if tokens[start + j] != last[j] {
                    all = false;
                }
            }
        }
        if all {
            return true;
        }
    }
    false
}

#[test]
fn detect_repeat_matches_brute_force() {
    let mut rng = stream(41, &[]);
    let mut positives = 0;
    for _ in 0..10_000 {
        let len = rng.gen_range(0..=64);
        let alphabet = rng.gen_range(1..=16);
        let mut t: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..alphabet)).collect();
        if len > 0 && rng.gen_bool(0.3) {
            // plant a repeated tail
            let p = rng.gen_range(1..=len.min(8));
            let copies = rng.gen_range(1..=len / p);
            let block: Vec<TokenId> = t[len - p..].to_vec();
            for c in 1..copies {
                let start = len - (c + 1) * p;
                t[start..start + p].copy_from_slice(&block);
            }
        }
        let min_period = rng.gen_range(1..4);
        let min_repeats = rng.gen_range(2..5);
        let want = brute_force(&t, min_period, min_repeats);
        positives += want as usize;
        assert_eq!(detect_repeat(&t, min_period, min_repeats), want, "{t:?} {min_period} {min_repeats}");
    }
    assert!(positives > 500);
}

#[test]
fn detect_repeat_examples() {
    assert!(detect_repeat(&[1, 2, 3, 4, 5, 6, 4, 5, 6, 4, 5, 6], 1, 3));
    assert!(!detect_repeat(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9], 1, 3));
    assert!(detect_repeat(&[5, 2, 7, 7, 7, 7], 1, 3));
    assert!(!detect_repeat(&[7, 7, 7, 7], 2, 3));
}

#[test]
fn repeat_ratio_counts_truncated_only() {
    let b = batch(&[vec![
        (vec![3, 3, 3, 3], 0.0),
        (vec![4, 4, 4, 4], 0.0),
        (vec![1, 2, 1, 3], 0.0),
        (vec![5, 5, 5, 5, 14], 0.0),
    ]]);
    assert!((repeat_ratio(&b, &FilterConfig::default()) - 2.0 / 3.0).abs() < 1e-12);
    let clean = batch(&[vec![(vec![3, 14], 1.0), (vec![4, 14], 0.0)]]);
    assert_eq!(repeat_ratio(&clean, &FilterConfig::default()), 0.0);
}

fn random_batch(rng: &mut impl Rng, n: usize, k: usize) -> rltricks::rollout::RolloutBatch<f64> {
    let groups: Vec<Vec<(Vec<TokenId>, f64)>> = (0..n)
        .map(|_| {
            let p = rng.gen_range(0.0..1.0);
            (0..k)
                .map(|_| {
                    let truncated = rng.gen_bool(0.2);
                    let len = rng.gen_range(1..6);
                    let toks = random_tokens(rng, len, truncated);
                    (toks, if rng.gen_bool(p) { 1.0 } else { 0.0 })
                })
                .collect()
        })
        .collect();
    batch(&groups)
}

#[test]
fn overlong_mask_tracks_truncation_and_is_idempotent() {
    let mut rng = stream(42, &[]);
    for _ in 0..500 {
        let b = random_batch(&mut rng, 4, 4);
        let (mask, report) = overlong_mask(&b);
        for (i, r) in b.responses().enumerate() {
            assert_eq!(mask.is_row_masked(i), r.truncated());
            assert_eq!(mask.active_count(i), if r.truncated() { 0 } else { r.len() });
        }
        assert_eq!(report.masked.len(), b.responses().filter(|r| r.truncated()).count());
        assert_eq!(mask.and(&mask), mask);
    }
}

#[test]
fn drop_mode_leaves_no_degenerate_groups() {
    let mut rng = stream(43, &[]);
    let cfg = FilterConfig {
        overlong_enabled: true,
        group_filter_mode: GroupFilterMode::Drop,
        ..FilterConfig::default()
    };
    let mut skipped = 0;
    for _ in 0..1000 {
        let b = random_batch(&mut rng, 6, 4);
        let out = group_filter(&b, &cfg, |_| unreachable!("drop never resamples"));
        let Some(kept) = out.batch else {
            skipped += 1;
            continue;
        };
        let include: Vec<bool> = kept.responses().map(|r| cfg.in_stats(r)).collect();
        let s = NormStrategy::new(NormVariant::GroupMeanStd, 1e-6).unwrap();
        let adv = compute_advantages_masked(&kept, &s, Some(&include));
        assert!(adv.degenerate_groups.is_empty());
        assert_eq!(out.kept.len(), kept.num_groups());
    }
    assert!(skipped < 1000);
}

#[test]
fn drop_example_and_all_uniform() {
    let cfg = FilterConfig {
        group_filter_mode: GroupFilterMode::Drop,
        ..FilterConfig::default()
    };
    let b = batch(&[vec![(vec![3, 14], 1.0), (vec![3, 14], 1.0)], vec![(vec![3, 14], 1.0), (vec![4, 14], 0.0)]]);
    let out = group_filter(&b, &cfg, |_| unreachable!());
    assert_eq!(out.kept, vec![1]);
    assert_eq!(out.report.dropped_groups, vec![0]);

    let uniform = batch(&[vec![(vec![3, 14], 0.0), (vec![3, 14], 0.0)]]);
    let out = group_filter(&uniform, &cfg, |_| unreachable!());
    assert!(out.batch.is_none());
    assert!(!out.report.diagnostics.is_empty());
}

#[test]
fn refill_degrades_to_drop_when_budget_runs_out() {
    let cfg = FilterConfig {
        group_filter_mode: GroupFilterMode::Refill,
        refill_budget: 3,
        ..FilterConfig::default()
    };
    let b = batch(&[
        vec![(vec![3, 14], 1.0), (vec![3, 14], 1.0)],
        vec![(vec![3, 14], 0.0), (vec![3, 14], 0.0)],
        vec![(vec![3, 14], 1.0), (vec![4, 14], 0.0)],
    ]);
    let uniform: RolloutGroup<f64> = batch(&[vec![(vec![3, 14], 0.0), (vec![3, 14], 0.0)]]).groups()[0].clone();
    let mixed: RolloutGroup<f64> = b.groups()[2].clone();
    let mut calls = 0;
    let out = group_filter(&b, &cfg, |attempt| {
        assert_eq!(attempt, calls);
        calls += 1;
        if attempt == 1 {
            mixed.clone()
        } else {
            uniform.clone()
        }
    });
    assert_eq!(calls, 3);
    let kept = out.batch.unwrap();
    assert_eq!(kept.num_groups(), 2);
    assert_eq!(out.report.refilled_groups.len(), 1);
    assert_eq!(out.report.dropped_groups.len(), 1);
    assert!(!out.report.diagnostics.is_empty());
}

proptest! {
    #[test]
    fn off_mode_is_identity(seed in 0u64..1000) {
        let mut rng = stream(seed, &[]);
        let b = random_batch(&mut rng, 3, 3);
        let out = group_filter(&b, &FilterConfig::default(), |_| unreachable!());
        prop_assert_eq!(out.batch.as_ref(), Some(&b));
    }

    #[test]
    fn detect_repeat_is_monotone_in_repeats(t in prop::collection::vec(0u32..4, 0..40), p in 1usize..4, r in 2usize..5) {
        if detect_repeat(&t, p, r + 1) {
            prop_assert!(detect_repeat(&t, p, r));
        }
    }
}
