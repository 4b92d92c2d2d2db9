use rand::Rng;
use rltricks::policy::{kl_with_logit_grad, log_softmax, logprob_logit_grad, Gradient, PolicyParams};
use rltricks::rng::stream;
use rltricks::surrogate::{surrogate_over, Aggregation, ClipConfig, LossConfig, TrajectoryTerms};
use rltricks::vocab::{TokenId, Vocabulary};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_params(rng: &mut impl Rng, context: usize, order: usize, scale: f64) -> PolicyParams<f64> {
    let mut p = PolicyParams::zeros(&Vocabulary::default(), context, order)
        .unwrap()
        .with_ngram_scale(scale)
        .unwrap();
    p.w_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    p.b_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    p.ngram_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    p
}

#[derive(Clone, Copy)]
enum Coord {
    W(usize),
    B(usize),
    Ngram(usize),
}

fn nudge(p: &mut PolicyParams<f64>, c: Coord, d: f64) {
    match c {
        Coord::W(i) => p.w_mut()[i] += d,
        Coord::B(i) => p.b_mut()[i] += d,
        Coord::Ngram(i) => p.ngram_mut()[i] += d,
    }
}

fn read(g: &Gradient<f64>, c: Coord, v: usize) -> f64 {
    match c {
        Coord::W(i) => g.w[i],
        Coord::B(i) => g.b[i],
        Coord::Ngram(i) => g.ngram_at(i / v, i % v),
    }
}

/// Every coordinate the given histories can touch.
fn touched(p: &PolicyParams<f64>, histories: &[Vec<TokenId>]) -> Vec<Coord> {
    let v = p.vocab_size();
    let mut out: Vec<Coord> = (0..v).map(Coord::B).collect();
    for h in histories {
        let f = p.features(h);
        for r in f.rows {
            out.extend((r * v..(r + 1) * v).map(Coord::W));
        }
        if let Some(r) = f.ngram_row {
            out.extend((r * v..(r + 1) * v).map(Coord::Ngram));
        }
    }
    out
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn check(params: &PolicyParams<f64>, coords: &[Coord], analytic: &Gradient<f64>, f: impl Fn(&PolicyParams<f64>) -> f64) -> f64 {
    let v = params.vocab_size();
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut p = params.clone();
    for &c in coords {
        nudge(&mut p, c, H);
        let up = f(&p);
        nudge(&mut p, c, -2.0 * H);
        let down = f(&p);
        nudge(&mut p, c, H);
        a.push(read(analytic, c, v));
        n.push((up - down) / (2.0 * H));
    }
    relative_error(&a, &n)
}

#[test]
fn log_prob_gradient_matches_central_differences() {
    let mut rng = stream(21, &[]);
    for trial in 0..100 {
        let context = rng.gen_range(1..5);
        let order = rng.gen_range(0..3);
        let scale = [1.0, 2.5, 4.0][rng.gen_range(0..3)];
        let tau = rng.gen_range(0.5..2.0);
        let params = random_params(&mut rng, context, order, scale);
        let history: Vec<TokenId> = (0..rng.gen_range(0..7)).map(|_| rng.gen_range(0..16)).collect();
        let token: TokenId = rng.gen_range(0..16);
        let g = params.grad_logprob(&history, token, tau);
        let coords = touched(&params, std::slice::from_ref(&history));
        let err = check(&params, &coords, &g, |p| p.log_probs(&history, tau)[token as usize]);
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn kl_logit_gradient_matches_central_differences() {
    let mut rng = stream(22, &[]);
    for trial in 0..100 {
        let tau = rng.gen_range(0.5..2.0);
        let z: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zq: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lq = log_softmax(&zq, tau);
        let (_, grad) = kl_with_logit_grad(&log_softmax(&z, tau), &lq, tau);
        let kl = |z: &[f64]| kl_with_logit_grad(&log_softmax(z, tau), &lq, tau).0;
        let numeric: Vec<f64> = (0..16)
            .map(|j| {
                let mut up = z.clone();
                up[j] += H;
                let mut down = z.clone();
                down[j] -= H;
                (kl(&up) - kl(&down)) / (2.0 * H)
            })
            .collect();
        let err = relative_error(&grad, &numeric);
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn uniform_logit_gradient_worked_example() {
    let lp = log_softmax(&[0.0f64; 4], 1.0);
    let g = logprob_logit_grad(&lp, 2, 1.0);
    for (x, want) in g.iter().zip([-0.25, -0.25, 0.75, -0.25]) {
        assert!((x - want).abs() < 1e-12);
    }
}

struct Traj {
    prompt: Vec<TokenId>,
    tokens: Vec<TokenId>,
    behavior: Vec<f64>,
    adv: f64,
    mask: Vec<bool>,
}

fn histories(t: &Traj) -> Vec<Vec<TokenId>> {
    (0..t.tokens.len())
        .map(|i| t.prompt.iter().chain(&t.tokens[..i]).copied().collect())
        .collect()
}

fn surrogate_at(
    p: &PolicyParams<f64>,
    reference: &PolicyParams<f64>,
    trajs: &[Traj],
    cfg: &LossConfig<f64>,
    tau: f64,
) -> (rltricks::surrogate::SurrogateOutput<f64>, Gradient<f64>) {
    let mut new_lp = Vec::new();
    let mut kls = Vec::new();
    let mut cache = Vec::new();
    for t in trajs {
        let mut lps = Vec::new();
        let mut kl_row = Vec::new();
        let mut row = Vec::new();
        for (h, &tok) in histories(t).iter().zip(&t.tokens) {
            let f = p.features(h);
            let lp = log_softmax(&p.logits_for(&f), tau);
            let (kl, kg) = kl_with_logit_grad(&lp, &reference.log_probs(h, tau), tau);
            lps.push(lp[tok as usize]);
            kl_row.push(kl);
            row.push((f, lp, kg));
        }
        new_lp.push(lps);
        kls.push(kl_row);
        cache.push(row);
    }
    let advs: Vec<Vec<f64>> = trajs.iter().map(|t| vec![t.adv; t.tokens.len()]).collect();
    let terms: Vec<TrajectoryTerms<'_, f64>> = trajs
        .iter()
        .enumerate()
        .map(|(i, t)| TrajectoryTerms {
            tokens: &t.tokens,
            behavior_logprobs: &t.behavior,
            new_logprobs: &new_lp[i],
            advantages: &advs[i],
            mask: &t.mask,
            kl: Some(&kls[i]),
        })
        .collect();
    let out = surrogate_over(&terms, cfg);
    let mut grad = Gradient::zeros_like(p);
    for (i, t) in trajs.iter().enumerate() {
        for (j, (f, lp, kg)) in cache[i].iter().enumerate() {
            let mut dz = logprob_logit_grad(lp, t.tokens[j], tau);
            for (d, k) in dz.iter_mut().zip(kg) {
                *d = *d * out.grad_new_logprob[i][j] + out.grad_kl[i][j] * k;
            }
            p.backprop_logits(f, &dz, &mut grad);
        }
    }
    (out, grad)
}

#[test]
fn full_surrogate_gradient_matches_central_differences() {
    let mut rng = stream(23, &[]);
    let mut clipped_seen = 0;
    for trial in 0..100 {
        let tau = rng.gen_range(0.7..1.5);
        let params = random_params(&mut rng, 3, 2, 4.0);
        let reference = random_params(&mut rng, 3, 2, 4.0);
        let agg = if rng.gen_bool(0.5) {
            Aggregation::TokenLevel
        } else {
            Aggregation::SequenceLevel
        };
        let cfg = LossConfig::new(ClipConfig::new(0.2, 0.28).unwrap(), agg, rng.gen_range(0.0..0.2)).unwrap();
        let trajs: Vec<Traj> = (0..4)
            .map(|_| {
                let prompt: Vec<TokenId> = vec![rng.gen_range(0..10), 10, rng.gen_range(0..10), 13];
                let tokens: Vec<TokenId> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..14)).collect();
                let mut behavior = Vec::new();
                let mut h = prompt.clone();
                for &tok in &tokens {
                    behavior.push(params.log_probs(&h, tau)[tok as usize] + rng.gen_range(-0.6..0.6));
                    h.push(tok);
                }
                let mask = tokens.iter().map(|_| rng.gen_bool(0.85)).collect();
                Traj {
                    prompt,
                    tokens,
                    behavior,
                    adv: rng.gen_range(-2.0..2.0),
                    mask,
                }
            })
            .collect();
        let (out, grad) = surrogate_at(&params, &reference, &trajs, &cfg, tau);
        for e in &out.events.events {
            assert_eq!(out.grad_new_logprob[e.trajectory][e.position], 0.0);
            clipped_seen += 1;
        }
        let all: Vec<Vec<TokenId>> = trajs.iter().flat_map(histories).collect();
        let coords = touched(&params, &all);
        let err = check(&params, &coords, &grad, |p| surrogate_at(p, &reference, &trajs, &cfg, tau).0.loss);
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
    assert!(clipped_seen > 0, "the sweep never exercised a clipped token");
}

#[test]
fn clipped_tokens_have_zero_ratio_gradient_numerically() {
    // A single upper-clipped token: the loss is flat in its log-prob.
    let cfg = LossConfig::new(ClipConfig::new(0.2, 0.28).unwrap(), Aggregation::TokenLevel, 0.0).unwrap();
    let loss = |lp: f64| {
        let t = TrajectoryTerms {
            tokens: &[3],
            behavior_logprobs: &[-1.0],
            new_logprobs: &[lp],
            advantages: &[1.0],
            mask: &[true],
            kl: None,
        };
        surrogate_over(&[t], &cfg).loss
    };
    let lp = -1.0 + 1.4f64.ln();
    assert!(((loss(lp + H) - loss(lp - H)) / (2.0 * H)).abs() < 1e-12);
    assert!((loss(lp) + 1.28).abs() < 1e-12);
}
