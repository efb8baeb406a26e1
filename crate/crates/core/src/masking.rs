//! Span masking over spectrogram frames and independent token masking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Real, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_SPAN_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub lambda: f64,
    pub span_len: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            lambda: DEFAULT_LAMBDA,
            span_len: DEFAULT_SPAN_LEN,
        }
    }
}

/// Which positions of a sequence are replaced by the learned mask vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub indicator: Vec<bool>,
    pub lambda: f64,
    pub seed: u64,
    /// `(start, len)` of each drawn span; empty for token plans.
    pub spans: Vec<(usize, usize)>,
}

impl MaskPlan {
    pub fn none(len: usize) -> Self {
        MaskPlan {
            indicator: vec![false; len],
            lambda: 0.0,
            seed: 0,
            spans: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indicator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicator.is_empty()
    }

    pub fn count(&self) -> usize {
        self.indicator.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.indicator.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.indicator.len() as f64
        }
    }

    pub fn positions(&self) -> Vec<usize> {
        self.indicator
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Draw non-overlapping spans of up to `span_len` frames at random unmasked
/// starts until at least `lambda · len` frames are masked. A span stops early
/// at the sequence end or at an already masked frame.
pub fn mask_span(len: usize, lambda: f64, span_len: usize, seed: u64) -> MaskPlan {
    let lambda = lambda.clamp(0.0, 1.0);
    let span_len = span_len.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indicator = vec![false; len];
    let mut spans = Vec::new();
    let budget = lambda * len as f64;
    let mut masked = 0usize;
    let mut starts: Vec<usize> = (0..len).collect();
    starts.shuffle(&mut rng);
    for s in starts {
        if masked as f64 >= budget {
            break;
        }
        if indicator[s] {
            continue;
        }
        let mut n = 0;
        while n < span_len && s + n < len && !indicator[s + n] {
            indicator[s + n] = true;
            n += 1;
        }
        masked += n;
        spans.push((s, n));
    }
    spans.sort_unstable();
    MaskPlan {
        indicator,
        lambda,
        seed,
        spans,
    }
}

/// Mask each position independently with probability `lambda`.
pub fn mask_token(len: usize, lambda: f64, seed: u64) -> MaskPlan {
    let lambda = lambda.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MaskPlan {
        indicator: (0..len).map(|_| rng.gen::<f64>() < lambda).collect(),
        lambda,
        seed,
        spans: Vec::new(),
    }
}

/// Copy of `frames: [T, d]` with masked rows replaced by `fill`.
pub fn apply_mask<F: Real>(frames: &Tensor<F>, plan: &MaskPlan, fill: &[F]) -> Tensor<F> {
    let d = frames.cols();
    assert_eq!(fill.len(), d, "mask vector width");
    let mut out = frames.clone();
    for (t, &m) in plan.indicator.iter().enumerate() {
        if m {
            out.data_mut()[t * d..(t + 1) * d].copy_from_slice(fill);
        }
    }
    out
}
