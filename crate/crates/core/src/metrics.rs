//! Corpus BLEU, macro-averaged ROUGE-1/2/L and token-pooled perplexity.
//!
//! BLEU smooths zero n-gram matches by adding `1e-9` to the numerator.
//! Other toolkits default to different smoothing, so scores with zero
//! higher-order matches are not comparable across implementations.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::TokenSeq;

pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    NoPairs,
    #[error("max_n must be at least 1")]
    BadOrder,
    #[error("pair {index}: {logprobs} logprobs for {tokens} hypothesis tokens")]
    LogprobLength { index: usize, logprobs: usize, tokens: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub hypothesis: TokenSeq,
    pub reference: TokenSeq,
    pub logprobs: Option<Vec<f64>>,
}

impl EvalPair {
    pub fn new(hypothesis: TokenSeq, reference: TokenSeq) -> Self {
        Self { hypothesis, reference, logprobs: None }
    }

    pub fn with_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        self.logprobs = Some(logprobs);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub bleu: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub perplexity: Option<f64>,
    pub n_pairs: usize,
    pub excluded_from_ppl: usize,
}

impl MetricsReport {
    pub fn compute(pairs: &[EvalPair]) -> Result<Self, MetricsError> {
        let bleu = bleu(pairs, 4)?;
        let (rouge1_f, rouge2_f, rouge_l_f) = rouge(pairs)?;
        let ppl = perplexity(pairs)?;
        Ok(Self {
            bleu,
            rouge1_f,
            rouge2_f,
            rouge_l_f,
            perplexity: ppl.value,
            n_pairs: pairs.len(),
            excluded_from_ppl: ppl.excluded,
        })
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Matches clipped by reference counts.
fn clipped_overlap(hyp: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    hyp.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

/// Corpus-level BLEU with uniform weights over orders `1..=max_n`.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    if max_n == 0 {
        return Err(MetricsError::BadOrder);
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        hyp_len += p.hypothesis.len();
        ref_len += p.reference.len();
        for n in 1..=max_n {
            let h = ngram_counts(&p.hypothesis, n);
            let r = ngram_counts(&p.reference, n);
            matches[n - 1] += clipped_overlap(&h, &r);
            totals[n - 1] += p.hypothesis.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            let p = if m == 0 { BLEU_EPSILON / t.max(1) as f64 } else { m as f64 / t as f64 };
            p.ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let brevity = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0);
    Ok((log_precision + brevity).exp())
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    let p = if hyp_total == 0 { 0.0 } else { overlap as f64 / hyp_total as f64 };
    let r = if ref_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn rouge_n(hyp: &[String], reference: &[String], n: usize) -> f64 {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    f1(clipped_overlap(&h, &r), hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// `(rouge1_f, rouge2_f, rougeL_f)`, each averaged over pairs.
pub fn rouge(pairs: &[EvalPair]) -> Result<(f64, f64, f64), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
    for p in pairs {
        r1 += rouge_n(&p.hypothesis, &p.reference, 1);
        r2 += rouge_n(&p.hypothesis, &p.reference, 2);
        rl += f1(lcs_length(&p.hypothesis, &p.reference), p.hypothesis.len(), p.reference.len());
    }
    let n = pairs.len() as f64;
    Ok((r1 / n, r2 / n, rl / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    pub value: Option<f64>,
    /// Pairs that carried no log-probabilities.
    pub excluded: usize,
}

/// `exp(-Σ logprob / Σ tokens)` over the pairs that carry log-probabilities.
pub fn perplexity(pairs: &[EvalPair]) -> Result<Perplexity, MetricsError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut excluded = 0;
    for (index, p) in pairs.iter().enumerate() {
        let Some(lps) = &p.logprobs else {
            excluded += 1;
            continue;
        };
        if lps.len() != p.hypothesis.len() {
            return Err(MetricsError::LogprobLength { index, logprobs: lps.len(), tokens: p.hypothesis.len() });
        }
        sum += lps.iter().sum::<f64>();
        count += lps.len();
    }
    let value = (count > 0).then(|| (-sum / count as f64).exp());
    Ok(Perplexity { value, excluded })
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) memory.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> TokenSeq {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn pair(h: &str, r: &str) -> EvalPair {
        EvalPair::new(t(h), t(r))
    }

    /// Exhaustive: longest subsequence of `a` (by bitmask) that is also a
    /// subsequence of `b`.
    fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
        fn is_subseq(s: &[u8], b: &[u8]) -> bool {
            let mut it = b.iter();
            s.iter().all(|c| it.any(|d| d == c))
        }
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subseq(&s, b).then_some(s.len())
            })
            .max()
            .unwrap()
    }

    #[test]
    fn bleu_identical_is_one() {
        let pairs = vec![pair("the cat sat on the mat", "the cat sat on the mat"), pair("a b c d e", "a b c d e")];
        assert_eq!(bleu(&pairs, 4).unwrap(), 1.0);
    }

    #[test]
    fn bleu_hand_example() {
        let pairs = vec![pair("a b c d", "a b c e")];
        // trigrams of the hypothesis: "a b c" (matched) and "b c d" (not)
        let hyp = t("a b c d");
        let reference = t("a b c e");
        let mut precisions = Vec::new();
        for n in 1..=4 {
            let grams: Vec<_> = hyp.windows(n).collect();
            let matched = grams.iter().filter(|g| reference.windows(n).any(|r| r == **g)).count();
            precisions.push(if matched == 0 { 1e-9 / grams.len() as f64 } else { matched as f64 / grams.len() as f64 });
        }
        assert_eq!(precisions[..3], [0.75, 2.0 / 3.0, 0.5]);
        let expected = (0.75f64 * (2.0 / 3.0) * 0.5 * 1e-9).powf(0.25);
        let got = bleu(&pairs, 4).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!(((got - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let pairs = vec![pair("a b", "a b c d")];
        let got = bleu(&pairs, 1).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu4_can_exceed_bleu1_when_pooling() {
        // The short mismatched pair only dilutes the unigram precision:
        // p1 = 4/5 while p2 = p3 = p4 = 1.
        let pairs = vec![pair("a b c d", "a b c d"), pair("z", "y")];
        let b1 = bleu(&pairs, 1).unwrap();
        let b4 = bleu(&pairs, 4).unwrap();
        assert!((b1 - 0.8).abs() < 1e-12);
        assert!((b4 - 0.8f64.powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn bleu_errors_and_empty_hypothesis() {
        assert_eq!(bleu(&[], 4), Err(MetricsError::NoPairs));
        assert_eq!(bleu(&[pair("a", "a")], 0), Err(MetricsError::BadOrder));
        assert_eq!(bleu(&[pair("", "a b")], 4).unwrap(), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge(&[pair("a b c", "a b c")]).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(rouge(&[pair("a b", "b a")]).unwrap(), (1.0, 0.0, 0.5));
        assert_eq!(rouge(&[pair("a b", "c d")]).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(rouge(&[]), Err(MetricsError::NoPairs));
        // macro average
        let (r1, _, _) = rouge(&[pair("a", "a"), pair("a", "b")]).unwrap();
        assert_eq!(r1, 0.5);
    }

    #[test]
    fn rouge_clips_counts() {
        // hyp has three "a", reference one: P = 1/3, R = 1
        let (r1, _, _) = rouge(&[pair("a a a", "a")]).unwrap();
        assert!((r1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perplexity_cases() {
        let lp = -(50f64).ln();
        let p = EvalPair::new(t("a b c"), t("x")).with_logprobs(vec![lp; 3]);
        let got = perplexity(&[p]).unwrap().value.unwrap();
        assert!((got - 50.0).abs() < 1e-9);

        let p = EvalPair::new(t("a b"), t("x")).with_logprobs(vec![0.0, 0.0]);
        assert_eq!(perplexity(&[p]).unwrap().value, Some(1.0));

        let pairs = vec![
            EvalPair::new(t("a b"), t("x")).with_logprobs(vec![-1.0, -1.0]),
            EvalPair::new(t("a b c d"), t("x")).with_logprobs(vec![-2.0; 4]),
            EvalPair::new(t("a"), t("x")),
        ];
        let got = perplexity(&pairs).unwrap();
        assert!((got.value.unwrap() - (10.0f64 / 6.0).exp()).abs() < 1e-12);
        assert_eq!(got.excluded, 1);

        assert_eq!(perplexity(&[pair("a", "a")]).unwrap(), Perplexity { value: None, excluded: 1 });
        let bad = vec![pair("a", "a"), EvalPair::new(t("a b"), t("a")).with_logprobs(vec![-1.0])];
        assert_eq!(perplexity(&bad), Err(MetricsError::LogprobLength { index: 1, logprobs: 1, tokens: 2 }));
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length(&t("a b c"), &t("a b c")), 3);
        assert_eq!(lcs_length(&t("a b"), &t("c d")), 0);
        assert_eq!(lcs_length(&t("a b c d"), &t("b d")), 2);
        assert_eq!(lcs_oracle(b"abcd", b"bd"), 2);
        assert_eq!(lcs_length::<String>(&[], &t("a")), 0);
    }

    #[test]
    fn report_without_logprobs() {
        let r = MetricsReport::compute(&[pair("a b c d", "a b c d")]).unwrap();
        assert_eq!(r.perplexity, None);
        assert_eq!(r.excluded_from_ppl, 1);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["rougeL_f"], 1.0);
        assert!(json["perplexity"].is_null());
    }

    fn seq(max_len: usize) -> impl Strategy<Value = TokenSeq> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..=max_len)
            .prop_map(|v| v.into_iter().map(str::to_owned).collect())
    }

    proptest! {
        #[test]
        fn lcs_matches_enumeration(a in prop::collection::vec(0u8..4, 0..=12), b in prop::collection::vec(0u8..4, 0..=12)) {
            prop_assert_eq!(lcs_length(&a, &b), lcs_oracle(&a, &b));
        }

        #[test]
        fn rouge1_symmetric(h in seq(10), r in seq(10)) {
            let a = rouge(&[EvalPair::new(h.clone(), r.clone())]).unwrap().0;
            let b = rouge(&[EvalPair::new(r, h)]).unwrap().0;
            prop_assert!((a - b).abs() < 1e-15);
        }

        #[test]
        fn order_invariance(pairs in prop::collection::vec((seq(8), seq(8)), 1..8), rot in 0usize..8) {
            let pairs: Vec<EvalPair> = pairs.into_iter().map(|(h, r)| EvalPair::new(h, r)).collect();
            let mut shuffled = pairs.clone();
            shuffled.reverse();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            prop_assert!((bleu(&pairs, 4).unwrap() - bleu(&shuffled, 4).unwrap()).abs() < 1e-12);
            let (a1, a2, al) = rouge(&pairs).unwrap();
            let (b1, b2, bl) = rouge(&shuffled).unwrap();
            prop_assert!((a1 - b1).abs() < 1e-12 && (a2 - b2).abs() < 1e-12 && (al - bl).abs() < 1e-12);
        }

        #[test]
        fn perplexity_at_least_one(lps in prop::collection::vec(-20.0f64..=0.0, 1..20)) {
            let hyp: TokenSeq = (0..lps.len()).map(|i| i.to_string()).collect();
            let p = EvalPair::new(hyp, vec![]).with_logprobs(lps);
            prop_assert!(perplexity(&[p]).unwrap().value.unwrap() >= 1.0);
        }
    }
}
