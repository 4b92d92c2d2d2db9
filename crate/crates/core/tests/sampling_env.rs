use proptest::prelude::*;
use rand::Rng;
use rltricks::env::{
    difficulty_histogram, gen_dataset, read_dataset, verify, write_dataset, ArithmeticTask, DifficultyTier,
    Verifier,
};
use rltricks::optim::{Optimizer, OptimizerConfig};
use rltricks::policy::{
    entropy_of, log_softmax, sample_response, sample_token, softmax, truncated_support, warm_start,
    Demonstration, PolicyParams, SamplerConfig,
};
use rltricks::rng::stream;
use rltricks::vocab::{Op, Vocabulary};

#[test]
fn log_softmax_worked_example() {
    let lp = log_softmax(&[1.0f64, 0.0], 1.0);
    assert!((lp[0] + 0.31326).abs() < 1e-5);
    assert!((lp[1] + 1.31326).abs() < 1e-5);
    let cold = log_softmax(&[1.0f64, 0.5, 0.0], 1e-3);
    assert!(cold[0].abs() < 1e-2);
}

#[test]
fn sampled_frequencies_match_softmax() {
    let mut rng = stream(51, &[]);
    let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let probs = softmax(&logits, 1.0);
    let sampler = SamplerConfig {
        temperature: 1.0,
        top_k: 16,
        top_p: 1.0,
        max_new_tokens: 1,
    };
    let n = 100_000;
    let mut counts = [0usize; 16];
    for _ in 0..n {
        counts[sample_token(&probs, &sampler, &mut rng)] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let expected = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - expected).abs() <= 3.0 * sigma, "{c} vs {expected} +- {sigma}");
    }
}

#[test]
fn truncation_keeps_top_mass() {
    let probs = [0.1, 0.4, 0.3, 0.2];
    assert_eq!(truncated_support(&probs, 4, 1.0), vec![1, 2, 3, 0]);
    assert_eq!(truncated_support(&probs, 2, 1.0), vec![1, 2]);
    assert_eq!(truncated_support(&probs, 4, 0.65), vec![1, 2]);
    assert_eq!(truncated_support(&probs, 4, 0.7), vec![1, 2]);
    assert_eq!(truncated_support(&[0.25; 4], 2, 1.0), vec![0, 1]);
}

#[test]
fn behavior_logprobs_come_from_the_full_softmax() {
    let v = Vocabulary::default();
    let mut p = PolicyParams::<f64>::zeros(&v, 2, 0).unwrap();
    p.b_mut()[3] = 2.0;
    let sampler = SamplerConfig {
        temperature: 1.0,
        top_k: 1,
        top_p: 1.0,
        max_new_tokens: 3,
    };
    let s = sample_response(&p, &[1, 10, 2, 13], &sampler, &v, &mut stream(0, &[]));
    let full = log_softmax(p.b(), 1.0)[3];
    assert_eq!(s.response.tokens().ids(), &[3, 3, 3]);
    assert!(s.response.truncated());
    assert!(s.response.behavior_logprobs().iter().all(|&x| x == full));
    assert!(full < 0.0);
}

#[test]
fn uniform_entropy_is_ln_v() {
    let lp = log_softmax(&[0.0f64; 16], 1.0);
    assert!((entropy_of(&lp) - 16f64.ln()).abs() < 1e-12);
    let half = [0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY];
    assert!((entropy_of(&half) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn verifier_examples_and_soundness() {
    let v = Vocabulary::default();
    let t = ArithmeticTask::new(3, vec![(Op::Add, 4)]);
    assert_eq!(t.answer, 7);
    assert_eq!(verify(&t, &[7, v.eos()], &v), 1);
    assert_eq!(verify(&t, &[7], &v), 0);
    assert_eq!(verify(&t, &[7, 7, v.eos()], &v), 0);
    for tier in [DifficultyTier::Easy, DifficultyTier::Medium, DifficultyTier::Hard] {
        for task in gen_dataset(tier, 500, 3).unwrap() {
            let fold = task.ops.iter().fold(task.start as i32, |acc, &(op, d)| {
                let d = d as i32;
                match op {
                    Op::Add => (acc + d).rem_euclid(10),
                    Op::Sub => (acc - d).rem_euclid(10),
                    Op::Mul => (acc * d).rem_euclid(10),
                }
            });
            assert_eq!(task.answer as i32, fold);
            assert_eq!(verify(&task, &task.canonical_response(&v), &v), 1);
            let (lo, hi) = tier.op_range();
            assert!((lo..=hi).contains(&task.ops.len()));
        }
    }
}

#[test]
fn datasets_are_seeded() {
    assert_eq!(gen_dataset(DifficultyTier::Easy, 3, 7).unwrap(), gen_dataset(DifficultyTier::Easy, 3, 7).unwrap());
    assert_ne!(gen_dataset(DifficultyTier::Easy, 30, 7).unwrap(), gen_dataset(DifficultyTier::Easy, 30, 8).unwrap());
    assert!(gen_dataset(DifficultyTier::Easy, 0, 7).is_err());
}

/// Monte-Carlo estimate of the chance rate for the uniform policy, drawn with
/// an independent generator: first token must be the answer, second EOS.
fn chance_rate(samples: usize) -> f64 {
    let mut rng = stream(99, &[]);
    let hits = (0..samples)
        .filter(|_| rng.gen_range(0..16) == 4 && rng.gen_range(0..16) == 14)
        .count();
    hits as f64 / samples as f64
}

#[test]
fn uniform_policy_histogram_matches_monte_carlo() {
    let v = Vocabulary::default();
    let p = PolicyParams::<f64>::zeros(&v, 4, 2).unwrap();
    let tasks = gen_dataset(DifficultyTier::Easy, 2000, 5).unwrap();
    let sampler = SamplerConfig {
        temperature: 1.0,
        top_k: 16,
        top_p: 1.0,
        max_new_tokens: 8,
    };
    let k = 8;
    let h = difficulty_histogram(&tasks, &p, &sampler, Verifier::default(), &v, k, 1);
    let total: usize = h.per_task.iter().sum();
    let rate = total as f64 / (tasks.len() * k) as f64;
    let mc = chance_rate(10_000);
    assert!((1.0 / 256.0 - mc).abs() < 0.002, "oracle drifted: {mc}");
    // 16000 rollouts at p = 1/256: sigma is about 4.9e-4
    assert!((rate - 1.0 / 256.0).abs() < 3.0 * 4.9e-4 + (mc - 1.0 / 256.0).abs(), "rate {rate}");
    assert_eq!(h.counts.iter().sum::<usize>(), tasks.len());
    assert_eq!(h.counts.len(), k + 1);
}

#[test]
fn greedy_untrained_policy_scores_zero() {
    let v = Vocabulary::default();
    let p = PolicyParams::<f64>::zeros(&v, 4, 2).unwrap();
    let tasks = gen_dataset(DifficultyTier::Easy, 200, 5).unwrap();
    let r = rltricks::trainer::evaluate(&p, &tasks, &v, Verifier::default(), 8);
    assert_eq!(r.accuracy, 0.0);
    assert_eq!(r.mean_len, 8.0);
}

#[test]
fn tiers_separate_under_an_easy_trained_policy() {
    let v = Vocabulary::default();
    let easy = gen_dataset(DifficultyTier::Easy, 2000, 1).unwrap();
    let demos: Vec<Demonstration> = easy
        .iter()
        .map(|t| Demonstration {
            prompt: t.prompt_ids(&v),
            target: t.canonical_response(&v),
        })
        .collect();
    let mut p = PolicyParams::<f64>::zeros(&v, 8, 4).unwrap().with_ngram_scale(4.0).unwrap();
    let mut opt = Optimizer::new(
        OptimizerConfig {
            lr: 0.05,
            ..Default::default()
        },
        &p,
    );
    warm_start(&mut p, &demos, 5, &mut opt, 1.0).unwrap();
    let sampler = SamplerConfig::desk_default(16);
    let mean = |tier| {
        let tasks = gen_dataset(tier, 500, 2).unwrap();
        let h = difficulty_histogram(&tasks, &p, &sampler, Verifier::default(), &v, 8, 3);
        h.per_task.iter().sum::<usize>() as f64 / tasks.len() as f64
    };
    let (e, m, h) = (mean(DifficultyTier::Easy), mean(DifficultyTier::Medium), mean(DifficultyTier::Hard));
    assert!(e > m && e > h, "easy {e} medium {m} hard {h}");
}

proptest! {
    #[test]
    fn dataset_round_trips(seed in 0u64..500, n in 1usize..40, tier in 0usize..3) {
        let tier = [DifficultyTier::Easy, DifficultyTier::Medium, DifficultyTier::Hard][tier];
        let v = Vocabulary::default();
        let tasks = gen_dataset(tier, n, seed).unwrap();
        let mut buf = Vec::new();
        write_dataset(&tasks, &v, &mut buf).unwrap();
        prop_assert_eq!(read_dataset(&buf[..], &v).unwrap(), tasks);
    }

    #[test]
    fn log_softmax_normalizes(logits in prop::collection::vec(-50.0f64..50.0, 2..20), tau in 0.05f64..5.0) {
        let s: f64 = log_softmax(&logits, tau).iter().map(|x| x.exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        let h = entropy_of(&log_softmax(&logits, tau));
        prop_assert!(h >= -1e-12 && h <= (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn sampling_is_reproducible(seed in 0u64..1000) {
        let v = Vocabulary::default();
        let mut p = PolicyParams::<f64>::zeros(&v, 3, 2).unwrap();
        let mut r = stream(seed, &[7]);
        p.w_mut().iter_mut().for_each(|x| *x = r.gen_range(-1.0..1.0));
        let sampler = SamplerConfig::desk_default(16);
        let a = sample_response(&p, &[1, 10, 2, 13], &sampler, &v, &mut stream(seed, &[1]));
        let b = sample_response(&p, &[1, 10, 2, 13], &sampler, &v, &mut stream(seed, &[1]));
        prop_assert_eq!(a.response, b.response);
    }
}
