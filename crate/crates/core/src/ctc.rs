//! CTC loss (forward algorithm over the blank-interleaved label
//! sequence), greedy framewise labeling, and the reduction that yields
//! the 1-best token sequence with its frame alignment.
//!
//! Blank id is fixed at 0. The forward recursion runs in log space with
//! log-sum-exp; no scaling tricks. An inadmissible (labels, T)
//! combination yields a flagged +infinity loss instead of an error so
//! training batches can skip it.

use crate::graph::{log_sum_exp, Tx};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Output of CTC reduction: tokens with the last frame of each run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReducedAlignment {
    pub tokens: Vec<usize>,
    /// frames[i] = index of the last frame of run i; strictly increasing.
    pub frames: Vec<usize>,
}

impl ReducedAlignment {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub struct CtcLoss {
    pub loss: Tx,
    /// False when T is too short for the label sequence; the loss is then
    /// +infinity and carries no gradient.
    pub admissible: bool,
}

/// Minimum frame count that admits the label sequence: one frame per
/// label plus one separating blank per adjacent repeat.
pub fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Negative log of the total probability of all CTC alignments of
/// `labels` under per-frame log-probabilities `log_probs` ([T, V],
/// already log-softmaxed). Differentiable through the input node.
pub fn ctc_loss(log_probs: &Tx, labels: &[usize]) -> CtcLoss {
    let lp = log_probs.value();
    assert_eq!(lp.rank(), 2, "ctc_loss expects [T, V] log probs, got {:?}", lp.shape);
    let (t_len, vocab) = (lp.shape[0], lp.shape[1]);
    for &l in labels {
        assert!(l != BLANK, "ctc labels must not contain the blank id");
        assert!(l < vocab, "ctc label {l} out of vocab {vocab}");
    }
    let g = log_probs.graph().clone();
    if t_len == 0 {
        // empty input: probability 1 for the empty label, impossible otherwise
        return if labels.is_empty() {
            CtcLoss { loss: g.constant(Tensor::scalar(0.0, g.dtype())), admissible: true }
        } else {
            CtcLoss { loss: g.constant(Tensor::scalar(f64::INFINITY, g.dtype())), admissible: false }
        };
    }
    if t_len < min_frames(labels) {
        return CtcLoss { loss: g.constant(Tensor::scalar(f64::INFINITY, g.dtype())), admissible: false };
    }

    // blank-interleaved state sequence: [b, l1, b, l2, ..., lL, b]
    let states: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = states.len();
    let (alpha, log_p) = forward_pass(&lp.data, t_len, vocab, &states);
    let beta = backward_pass(&lp.data, t_len, vocab, &states);

    let states_cl = states.clone();
    let loss = g.custom_unary(
        log_probs,
        Tensor::scalar(-log_p, g.dtype()),
        move |gout, pv, _| {
            let lp = pv[0];
            let (t_len, vocab) = (lp.shape[0], lp.shape[1]);
            let mut grad = vec![0.0; t_len * vocab];
            for t in 0..t_len {
                for (s, &k) in states_cl.iter().enumerate() {
                    let a = alpha[t * s_len + s];
                    let b = beta[t * s_len + s];
                    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                        continue;
                    }
                    grad[t * vocab + k] -= (a + b - lp.data[t * vocab + k] - log_p).exp();
                }
            }
            let scale = gout.data[0];
            for x in grad.iter_mut() {
                *x *= scale;
            }
            vec![Tensor::new(vec![t_len, vocab], grad, gout.dtype)]
        },
    );
    CtcLoss { loss, admissible: true }
}

/// alpha[t][s] includes the emission at frame t. Returns (alpha, log P).
fn forward_pass(lp: &[f64], t_len: usize, vocab: usize, states: &[usize]) -> (Vec<f64>, f64) {
    let s_len = states.len();
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[states[0]];
    if s_len > 1 {
        alpha[1] = lp[states[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_sum_exp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            // skip over a blank between distinct labels
            if s >= 2 && states[s] != BLANK && states[s] != states[s - 2] {
                acc = log_sum_exp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + lp[t * vocab + states[s]];
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_sum_exp(log_p, alpha[last + s_len - 2]);
    }
    (alpha, log_p)
}

/// beta[t][s] includes the emission at frame t (mirror of alpha).
fn backward_pass(lp: &[f64], t_len: usize, vocab: usize, states: &[usize]) -> Vec<f64> {
    let s_len = states.len();
    let ninf = f64::NEG_INFINITY;
    let mut beta = vec![ninf; t_len * s_len];
    let last_t = t_len - 1;
    beta[last_t * s_len + s_len - 1] = lp[last_t * vocab + states[s_len - 1]];
    if s_len > 1 {
        beta[last_t * s_len + s_len - 2] = lp[last_t * vocab + states[s_len - 2]];
    }
    for t in (0..last_t).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_sum_exp(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && states[s + 2] != BLANK && states[s + 2] != states[s] {
                acc = log_sum_exp(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = acc + lp[t * vocab + states[s]];
        }
    }
    beta
}

/// Per-frame argmax labels; exact ties break to the lowest token id.
pub fn greedy_frame_labels(log_probs: &Tensor) -> Vec<usize> {
    assert_eq!(log_probs.rank(), 2);
    let (t_len, vocab) = (log_probs.shape[0], log_probs.shape[1]);
    (0..t_len)
        .map(|t| {
            let row = &log_probs.data[t * vocab..(t + 1) * vocab];
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Remove blanks and collapse runs of identical labels, keeping the last
/// frame index of each run. `[a, blank, a]` yields two separate tokens.
pub fn ctc_reduce(frame_labels: &[usize]) -> ReducedAlignment {
    let mut tokens = Vec::new();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < frame_labels.len() {
        let label = frame_labels[i];
        let mut end = i;
        while end + 1 < frame_labels.len() && frame_labels[end + 1] == label {
            end += 1;
        }
        if label != BLANK {
            tokens.push(label);
            frames.push(end);
        }
        i = end + 1;
    }
    ReducedAlignment { tokens, frames }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Dtype;

    /// Brute force over all V^T frame label sequences: total probability
    /// of sequences that collapse to `labels`. Independent oracle.
    fn brute_force_log_p(log_probs: &Tensor, labels: &[usize]) -> f64 {
        let (t_len, vocab) = (log_probs.shape[0], log_probs.shape[1]);
        let mut total = f64::NEG_INFINITY;
        let n_paths = vocab.pow(t_len as u32);
        for code in 0..n_paths {
            let mut path = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                path.push(c % vocab);
                c /= vocab;
            }
            if ctc_reduce(&path).tokens == labels {
                let lp: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| log_probs.data[t * vocab + k])
                    .sum();
                total = log_sum_exp(total, lp);
            }
        }
        total
    }

    fn uniform_lp(t: usize, v: usize) -> Tensor {
        Tensor::full(vec![t, v], (1.0 / v as f64).ln(), Dtype::F64)
    }

    #[test]
    fn uniform_two_frame_example() {
        // T=2, V=2, label "a": alignments (a,-), (-,a), (a,a) -> P = 0.75
        let g = Graph::new(Dtype::F64);
        let lp = g.leaf(uniform_lp(2, 2));
        let out = ctc_loss(&lp, &[1]);
        assert!(out.admissible);
        assert!((out.loss.item() - (-0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn repeat_without_room_is_inadmissible() {
        let g = Graph::new(Dtype::F64);
        let lp = g.leaf(uniform_lp(2, 2));
        let out = ctc_loss(&lp, &[1, 1]);
        assert!(!out.admissible);
        assert_eq!(out.loss.item(), f64::INFINITY);
    }

    #[test]
    fn concentrated_mass_single_path() {
        // all mass on the path (a, -, b): loss = -log P(path)
        let g = Graph::new(Dtype::F64);
        let big = 30.0;
        let mut data = vec![-big; 9];
        data[1] = 0.0; // frame 0: a
        data[3] = 0.0; // frame 1: blank
        data[8] = 0.0; // frame 2: b
        let logits = g.leaf(Tensor::new(vec![3, 3], data, Dtype::F64));
        let lp = logits.log_softmax();
        let labels = [1usize, 2];
        let out = ctc_loss(&lp, &labels);
        let oracle = brute_force_log_p(&lp.value(), &labels);
        assert!((out.loss.item() + oracle).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_on_random_logits() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = rng.gen_range(1..=5);
            let v = rng.gen_range(2..=3);
            let label_len = rng.gen_range(1..=3.min(t));
            let labels: Vec<usize> = (0..label_len).map(|_| rng.gen_range(1..v)).collect();
            let g = Graph::new(Dtype::F64);
            let raw: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lp = g.leaf(Tensor::new(vec![t, v], raw, Dtype::F64)).log_softmax();
            let out = ctc_loss(&lp, &labels);
            if t < min_frames(&labels) {
                assert!(!out.admissible);
                continue;
            }
            let oracle = brute_force_log_p(&lp.value(), &labels);
            assert!(
                (out.loss.item() + oracle).abs() < 1e-9,
                "loss {} vs oracle {}",
                out.loss.item(),
                -oracle
            );
        }
    }

    #[test]
    fn greedy_labels_and_ties() {
        let lp = Tensor::new(
            vec![3, 3],
            vec![
                0.0, -1.0, -2.0, // blank
                -3.0, 0.0, -1.0, // a
                -3.0, 0.0, 0.0, // exact tie between 1 and 2 -> 1
            ],
            Dtype::F64,
        );
        assert_eq!(greedy_frame_labels(&lp), vec![0, 1, 1]);
        assert_eq!(greedy_frame_labels(&Tensor::zeros(vec![0, 3], Dtype::F64)), Vec::<usize>::new());
    }

    #[test]
    fn reduce_examples() {
        // [-, a, a, -, b] -> tokens [a, b], frames [2, 4]
        let r = ctc_reduce(&[0, 1, 1, 0, 2]);
        assert_eq!(r.tokens, vec![1, 2]);
        assert_eq!(r.frames, vec![2, 4]);

        // blank-separated repeat
        let r = ctc_reduce(&[1, 0, 1]);
        assert_eq!(r.tokens, vec![1, 1]);
        assert_eq!(r.frames, vec![0, 2]);

        // all blank
        let r = ctc_reduce(&[0, 0, 0]);
        assert!(r.is_empty());
    }

    #[test]
    fn reduce_roundtrip_through_reexpansion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = rng.gen_range(0..12);
            let seq: Vec<usize> = (0..t).map(|_| rng.gen_range(0..4)).collect();
            let r = ctc_reduce(&seq);
            // re-expand: token at its frame, blanks elsewhere
            let mut expanded = vec![BLANK; t];
            for (tok, &f) in r.tokens.iter().zip(&r.frames) {
                expanded[f] = *tok;
            }
            let r2 = ctc_reduce(&expanded);
            assert_eq!(r, r2);
            assert!(r.frames.windows(2).all(|w| w[0] < w[1]));
            assert!(r.tokens.iter().all(|&t| t != BLANK));
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        use crate::gradcheck::grad_check;
        use crate::params::ParamStore;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (t, v) = (5, 3);
        let raw: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut store = ParamStore::new();
        store.insert("logits", Tensor::new(vec![t, v], raw, Dtype::F64));
        let labels = vec![1usize, 2, 1];
        let report = grad_check(
            &store,
            |ctx| ctc_loss(&ctx.param("logits").log_softmax(), &labels).loss,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
    }
}
