//! Token-level WER and corpus BLEU, plus the line-delimited metrics
//! record format shared by all training stages.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

/// One metrics line: step, stage, split, metric, value (+ counts).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    pub stage: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub utterances: u64,
    pub skipped: u64,
}

impl EvalReport {
    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", serde_json::to_string(self).expect("serialize metrics record"))
    }
}

/// Levenshtein edit distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Per-utterance WER; `None` (flagged absent) for an empty reference.
pub fn wer(ref_tokens: &[usize], hyp_tokens: &[usize]) -> Option<f64> {
    if ref_tokens.is_empty() {
        return None;
    }
    Some(edit_distance(ref_tokens, hyp_tokens) as f64 / ref_tokens.len() as f64)
}

/// Corpus WER: summed edit distance over summed reference length.
pub fn corpus_wer(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> f64 {
    assert_eq!(refs.len(), hyps.len());
    let mut dist = 0usize;
    let mut len = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        dist += edit_distance(r, h);
        len += r.len();
    }
    dist as f64 / len.max(1) as f64
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over token ids: geometric mean of clipped n-gram
/// precisions (orders 1..=4) times the brevity penalty, as a percentage.
/// Orders with zero matches are smoothed add-one: (m+1)/(t+1); orders
/// with at least one match are left exact, so a perfect corpus scores
/// exactly 100. Single reference per hypothesis; empty hypotheses
/// contribute zero matches but count toward the brevity penalty.
pub fn corpus_bleu(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64, crate::Error> {
    if refs.is_empty() || refs.len() != hyps.len() {
        return Err(crate::Error::Data(format!(
            "corpus_bleu needs equal nonempty ref/hyp lists, got {}/{}",
            refs.len(),
            hyps.len()
        )));
    }
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (r, h) in refs.iter().zip(hyps) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            for (gram, &count) in &hc {
                totals[n - 1] += count;
                matches[n - 1] += count.min(*rc.get(gram).unwrap_or(&0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_prec_sum = 0.0;
    for n in 0..4 {
        let p = if totals[n] == 0 {
            // no n-grams of this order at all (short sequences)
            1.0
        } else if matches[n] == 0 {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_prec_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_prec_sum / 4.0).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&[1, 2, 3], &[1, 3]), Some(1.0 / 3.0)); // one deletion
        assert_eq!(wer(&[1, 2], &[1, 2]), Some(0.0));
        assert_eq!(wer(&[1], &[2, 3]), Some(2.0)); // sub + ins
        assert_eq!(wer(&[], &[1]), None);
    }

    #[test]
    fn wer_invariant_under_shared_extension() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let r: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..4)).collect();
            let h: Vec<usize> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..4)).collect();
            let pre: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..4)).collect();
            let suf: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..4)).collect();
            let d0 = edit_distance(&r, &h);
            let re: Vec<usize> = pre.iter().chain(&r).chain(&suf).cloned().collect();
            let he: Vec<usize> = pre.iter().chain(&h).chain(&suf).cloned().collect();
            assert_eq!(d0, edit_distance(&re, &he));
        }
    }

    #[test]
    fn bleu_perfect_is_exactly_100() {
        let corpus = vec![vec![1, 2, 3, 4, 5], vec![7, 8, 9, 1, 2, 3]];
        assert_eq!(corpus_bleu(&corpus, &corpus).unwrap(), 100.0);
    }

    #[test]
    fn bleu_empty_hypotheses_score_zero() {
        let refs = vec![vec![1, 2, 3]];
        let hyps = vec![vec![]];
        assert_eq!(corpus_bleu(&refs, &hyps).unwrap(), 0.0);
    }

    #[test]
    fn bleu_empty_corpus_is_an_error() {
        assert!(corpus_bleu(&[], &[]).is_err());
    }

    #[test]
    fn bleu_hand_computed_single_pair() {
        // ref [a,b,c,d], hyp [a,b,c,c]:
        // p1 = 3/4, p2 = 2/3, p3 = 1/2 (clipped), p4 = 0 -> smoothed 1/2; BP = 1
        let refs = vec![vec![1, 2, 3, 4]];
        let hyps = vec![vec![1, 2, 3, 3]];
        let expect = 100.0 * (((3.0f64 / 4.0).ln() + (2.0f64 / 3.0).ln() + 0.5f64.ln() + 0.5f64.ln()) / 4.0).exp();
        let got = corpus_bleu(&refs, &hyps).unwrap();
        assert!((got - expect).abs() < 1e-9, "got {got}, expect {expect}");
    }

    #[test]
    fn bleu_is_order_independent() {
        let refs = vec![vec![1, 2, 3, 4], vec![5, 6, 7], vec![1, 5, 2]];
        let hyps = vec![vec![1, 2, 4], vec![5, 6, 6], vec![1, 5, 2]];
        let a = corpus_bleu(&refs, &hyps).unwrap();
        let perm = [2usize, 0, 1];
        let refs2: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let hyps2: Vec<_> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let b = corpus_bleu(&refs2, &hyps2).unwrap();
        assert_eq!(a, b);
    }
}
