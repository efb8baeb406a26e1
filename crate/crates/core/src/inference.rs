//! Beam search with a GNMT length penalty, greedy decoding, and corpus BLEU.

use std::cmp::Ordering;
use std::collections::HashMap;

use thiserror::Error;

use crate::features::Spectrogram;
use crate::model::{Ctx, Model, ModelError};
use crate::numerics::{Real, Tape, Tensor};
use crate::subword::{BOS, EOS, MASK, PAD};

pub const MAX_DECODE_LEN: usize = 512;

/// Next-token log-distribution given a bos-prefixed prefix.
pub trait DecodeModel {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64>;
}

/// `((5 + len) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// `bos`, generated tokens, and `eos` when finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// `logprob / length_penalty(generated tokens, α)`.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without `bos` and `eos`.
    pub fn output(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }

    /// Number of generated tokens, `eos` included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Higher score first; equal scores resolved towards the lexicographically
/// smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search. Each step expands every live hypothesis by every token and
/// keeps the `beam` best candidates; those ending in `eos` are parked as
/// finished. Hypotheses still live after `max_len` tokens are terminated
/// without `eos`. Returns the best parked or terminated hypothesis.
pub fn beam_search<M: DecodeModel + ?Sized>(model: &M, beam: usize, alpha: f64, max_len: usize) -> Hypothesis {
    let beam = beam.max(1);
    let max_len = max_len.max(1);
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
        score: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 1..=max_len {
        let mut cands = Vec::with_capacity(live.len() * model.vocab_size());
        for h in &live {
            let lp = model.log_probs(&h.tokens);
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let logprob = h.logprob + l;
                cands.push(Hypothesis {
                    tokens,
                    logprob,
                    score: logprob / length_penalty(step, alpha),
                    finished: tok == EOS,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam);
        let (fin, rest): (Vec<_>, Vec<_>) = cands.into_iter().partition(|h| h.finished);
        done.extend(fin);
        live = rest;
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(rank);
    done.into_iter().next().expect("at least one hypothesis survives")
}

pub fn greedy<M: DecodeModel + ?Sized>(model: &M, max_len: usize) -> Hypothesis {
    beam_search(model, 1, 0.0, max_len)
}

/// Every sequence the search space contains, scored the same way.
pub fn exhaustive_search<M: DecodeModel + ?Sized>(model: &M, alpha: f64, max_len: usize) -> Hypothesis {
    fn go<M: DecodeModel + ?Sized>(m: &M, h: Hypothesis, alpha: f64, max_len: usize, best: &mut Option<Hypothesis>) {
        let step = h.tokens.len();
        if h.finished || step > max_len {
            if best.as_ref().is_none_or(|b| rank(&h, b) == Ordering::Less) {
                *best = Some(h);
            }
            return;
        }
        for (tok, &l) in m.log_probs(&h.tokens).iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let mut tokens = h.tokens.clone();
            tokens.push(tok);
            let logprob = h.logprob + l;
            let next = Hypothesis {
                tokens,
                logprob,
                score: logprob / length_penalty(step, alpha),
                finished: tok == EOS,
            };
            go(m, next, alpha, max_len, best);
        }
    }
    let mut best = None;
    let root = Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
        score: 0.0,
        finished: false,
    };
    go(model, root, alpha, max_len.max(1), &mut best);
    best.expect("non-empty search space")
}

/// Decoding length limit for a speech source of `frames` frames.
pub fn max_len_for_speech(frames: usize) -> usize {
    (2 * frames / 4).clamp(1, MAX_DECODE_LEN)
}

pub fn max_len_for_text(tokens: usize) -> usize {
    (2 * tokens).clamp(1, MAX_DECODE_LEN)
}

pub enum SourceInput<'a> {
    Speech(&'a Spectrogram),
    Text(&'a [usize]),
}

/// A model with its source encoded once (unmasked). Padding, `bos` and the
/// mask token are never proposed.
pub struct EncodedSource<'m, F: Real> {
    model: &'m Model<F>,
    memory: Tensor<F>,
    pub max_len: usize,
}

impl<'m, F: Real> EncodedSource<'m, F> {
    pub fn new(model: &'m Model<F>, source: SourceInput<'_>) -> Result<Self, ModelError> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, model);
        let (states, max_len) = match source {
            SourceInput::Speech(s) => (ctx.encode_speech_source(ctx.spectrogram(s))?.0, max_len_for_speech(s.num_frames())),
            SourceInput::Text(ids) => (ctx.encode_text_source(ids)?, max_len_for_text(ids.len())),
        };
        let memory = (*tape.value(states.hidden)).clone();
        Ok(EncodedSource { model, memory, max_len })
    }
}

impl<F: Real> DecodeModel for EncodedSource<'_, F> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, self.model);
        let memory = tape.constant(self.memory.clone());
        let mut lp = ctx.decode_step(memory, prefix).expect("decoder accepts any in-vocabulary prefix");
        for t in [PAD, BOS, MASK] {
            lp[t] = f64::NEG_INFINITY;
        }
        lp
    }
}

pub fn translate<F: Real>(model: &Model<F>, source: SourceInput<'_>, beam: usize, alpha: f64) -> Result<Hypothesis, ModelError> {
    let enc = EncodedSource::new(model, source)?;
    Ok(beam_search(&enc, beam, alpha, enc.max_len))
}

#[derive(Debug, Error, PartialEq)]
pub enum BleuError {
    #[error("empty corpus")]
    Empty,
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over whitespace tokens, in percent. Clipped n-gram counts
/// and lengths are pooled over the corpus. Orders longer than every
/// hypothesis have no n-grams and are left out of the geometric mean. When
/// a present order has no match the score is 0, unless `smooth` is set, in
/// which case the k-th such order counts as `1 / (2^k · total)`.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T], smooth: bool) -> Result<BleuReport, BleuError> {
    if hyps.len() != refs.len() {
        return Err(BleuError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(BleuError::Empty);
    }
    let (mut matches, mut totals) = ([0usize; 4], [0usize; 4]);
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngrams(&h, n);
            let rc = ngrams(&r, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = [0.0; 4];
    let mut log_sum = 0.0;
    let mut orders = 0;
    let mut zero = false;
    let mut k = 0;
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        orders += 1;
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if smooth {
            k += 1;
            1.0 / (2f64.powi(k) * totals[n] as f64)
        } else {
            zero = true;
            0.0
        };
        precisions[n] = p;
        if p > 0.0 {
            log_sum += p.ln();
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if zero || orders == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / orders as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}
