//! Connectionist temporal classification loss in log space.
//!
//! The label is interleaved with blanks (`b l1 b l2 … b`) and a forward and a
//! backward pass over that lattice give the sequence likelihood and its
//! derivative with respect to every per-frame log-probability.

use crate::numerics::Real;

/// Fewest frames able to emit `labels`: one per label plus one blank between
/// each pair of equal neighbours.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Returns the negative log-likelihood and its gradient with respect to the
/// `[frames, classes]` log-probabilities, or `None` when the label cannot be
/// aligned within `frames`.
pub(crate) fn ctc_forward_backward<F: Real>(
    log_probs: &[F],
    frames: usize,
    classes: usize,
    labels: &[usize],
    blank: usize,
) -> Option<(F, Vec<F>)> {
    if frames == 0 || ctc_min_frames(labels) > frames || labels.iter().any(|&l| l >= classes || l == blank) {
        return None;
    }
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k].f64();
    // Skip transition s-2 -> s allowed for non-blank s whose label differs from s-2.
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = if s_len > 1 { lse2(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if log_p == ninf {
        return None;
    }

    // beta[t][s]: log-probability of finishing from state s at frame t,
    // excluding the emission at t.
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, ext[s2]);
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = lse2(acc, next(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = lse2(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![F::zero(); frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                grad[t * classes + ext[s]] -= F::c(occ.exp());
            }
        }
    }
    Some((F::c(-log_p), grad))
}
