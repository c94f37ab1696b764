//! REINFORCE and finite differences against an exact expected reward
//! computed by enumerating every trajectory.

use lorag_core::rl::policy::{PolicyParams, RowKey};
use lorag_core::rl::{context_from_texts, finite_difference, reinforce_gradient, score_row, RewardSpec, Setup};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn policy() -> PolicyParams {
    let vocab = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let mut p = PolicyParams::uniform(vocab).unwrap();
    for (i, l) in p.logits_mut().iter_mut().enumerate() {
        *l = ((i as f64) * 1.7).sin() * 0.3;
    }
    p
}

fn setup(max_tokens: usize) -> Setup {
    let q = vec!["q".to_string()];
    Setup {
        context: context_from_texts(&["a c".to_string()], &q),
        x: q,
        spec: RewardSpec::grounding_overlap(),
        max_tokens,
    }
}

/// Expected total reward, summed over all V^T token sequences. Tokens
/// "a" and "c" earn 1 per step.
fn exact_return(p: &PolicyParams, max_tokens: usize) -> f64 {
    fn walk(p: &PolicyParams, prev: Option<usize>, left: usize, prob: f64, acc: f64, out: &mut f64) {
        if left == 0 {
            *out += prob * acc;
            return;
        }
        let row = p.row(p.row_index(RowKey { prev, ctx: true }));
        let z: f64 = row.iter().map(|l| l.exp()).sum();
        for (j, l) in row.iter().enumerate() {
            let r = if j == 0 || j == 2 { 1.0 } else { 0.0 };
            walk(p, Some(j), left - 1, prob * l.exp() / z, acc + r, out);
        }
    }
    let mut out = 0.0;
    walk(p, None, max_tokens, 1.0, 0.0, &mut out);
    out
}

fn exact_gradient(p: &PolicyParams, max_tokens: usize, index: usize) -> f64 {
    let h = 1e-5;
    let mut plus = p.clone();
    plus.logits_mut()[index] += h;
    let mut minus = p.clone();
    minus.logits_mut()[index] -= h;
    (exact_return(&plus, max_tokens) - exact_return(&minus, max_tokens)) / (2.0 * h)
}

fn ctx_coordinates(p: &PolicyParams) -> Vec<usize> {
    let v = p.vocab_size();
    (0..p.num_rows()).filter(|&r| p.row_key(r).ctx).flat_map(|r| r * v..(r + 1) * v).collect()
}

#[test]
fn reinforce_is_unbiased_against_enumeration() {
    let p = policy();
    let s = setup(3);
    let est = reinforce_gradient(&p, &s, 50_000, 11).unwrap();
    assert!((est.mean_reward - exact_return(&p, 3)).abs() < 0.02);
    for i in ctx_coordinates(&p) {
        let exact = exact_gradient(&p, 3, i);
        assert!((est.grads[i] - exact).abs() < 0.015, "coordinate {i}: {} vs {exact}", est.grads[i]);
    }
    // Rows conditioned on an empty context are never sampled here.
    let v = p.vocab_size();
    for r in (0..p.num_rows()).filter(|&r| !p.row_key(r).ctx) {
        assert!(est.grads[r * v..(r + 1) * v].iter().all(|&g| g == 0.0));
    }
}

#[test]
fn finite_difference_matches_enumeration() {
    let p = policy();
    let s = setup(3);
    for i in [1, 7, 13, 30, 37] {
        let fd = finite_difference(&p, &s, i, 0.05, 20_000, 5).unwrap();
        let exact = exact_gradient(&p, 3, i);
        assert!((fd - exact).abs() < 0.01, "coordinate {i}: {fd} vs {exact}");
    }
}

#[test]
fn step_sizes_agree_within_noise() {
    let p = policy();
    let s = setup(3);
    for i in [3, 13, 30] {
        let a = finite_difference(&p, &s, i, 0.05, 50_000, 3).unwrap();
        let b = finite_difference(&p, &s, i, 0.1, 50_000, 3).unwrap();
        assert!((a - b).abs() < 0.01, "coordinate {i}: {a} vs {b}");
    }
}

#[test]
fn constant_reward_offset_keeps_expected_gradient() {
    let p = policy();
    let s0 = setup(3);
    let mut s1 = s0.clone();
    s1.spec = s1.spec.with_offset(1.0);
    let g0 = reinforce_gradient(&p, &s0, 50_000, 2).unwrap();
    let g1 = reinforce_gradient(&p, &s1, 50_000, 2).unwrap();
    assert!((g1.mean_reward - g0.mean_reward - 3.0).abs() < 1e-9);
    for i in ctx_coordinates(&p) {
        let (a, b) = (g0.grads[i], g1.grads[i]);
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        assert!(rel <= 0.1, "coordinate {i}: {a} vs {b}");
    }
}

#[test]
fn sampled_score_rows_sum_to_zero() {
    let p = policy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut checked = 0;
    while checked < 10_000 {
        for step in p.rollout(checked % 2 == 0, 5, 1.0, &mut rng) {
            let g = score_row(&p, step.row, step.token);
            assert!(g.iter().sum::<f64>().abs() < 1e-9);
            checked += 1;
        }
    }
}

#[test]
fn terminal_reward_gradient_is_unbiased() {
    let p = policy();
    let s = Setup { spec: RewardSpec::terminal_rouge(vec!["a".into(), "b".into()]), ..setup(2) };
    // Exact expectation of ROUGE-L F1 over the 16 two-token sequences.
    let exact = |p: &PolicyParams| {
        let v = p.vocab();
        let mut j = 0.0;
        for t0 in 0..4 {
            for t1 in 0..4 {
                let r0 = p.probs(p.row_index(RowKey::start(true)), 1.0)[t0];
                let r1 = p.probs(p.row_index(RowKey { prev: Some(t0), ctx: true }), 1.0)[t1];
                let hyp = [v[t0].as_str(), v[t1].as_str()];
                let lcs = if hyp == ["a", "b"] {
                    2.0
                } else if hyp.contains(&"a") || hyp.contains(&"b") {
                    1.0
                } else {
                    0.0
                };
                // Both sides have length 2, so F1 = lcs / 2.
                j += r0 * r1 * lcs / 2.0;
            }
        }
        j
    };
    let est = reinforce_gradient(&p, &s, 50_000, 4).unwrap();
    for i in [1, 3, 5, 9, 11] {
        let mut plus = p.clone();
        plus.logits_mut()[i] += 1e-5;
        let mut minus = p.clone();
        minus.logits_mut()[i] -= 1e-5;
        let want = (exact(&plus) - exact(&minus)) / 2e-5;
        assert!((est.grads[i] - want).abs() < 0.01, "coordinate {i}: {} vs {want}", est.grads[i]);
    }
}
