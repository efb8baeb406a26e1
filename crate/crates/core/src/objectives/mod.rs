//! Loss terms: masked speech reconstruction, masked token prediction,
//! teacher-forced translation NLL, CTC, and their weighted combination.

pub mod ctc;

use std::fmt::Write as _;
use std::io::{self, Write};

use crate::corpus::Batch;
use crate::masking::{mask_span, mask_token, MaskPlan};
use crate::model::{Ctx, ModelError, Segment};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::seed::mix;
use crate::subword::{BOS, EOS};

pub use ctc::ctc_min_frames;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub st: f64,
    pub mt: f64,
    pub mlm: f64,
    pub ctc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            st: 1.0,
            mt: 1.0,
            mlm: 1.0,
            ctc: 0.3,
        }
    }
}

/// Scalar value of every term of one step. `total` is accumulated in f64
/// from the terms and weights; absent terms are exactly 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub speech: f64,
    pub src: f64,
    pub tgt: f64,
    pub st: f64,
    pub mt: f64,
    pub ctc: f64,
    pub weights: LossWeights,
    pub total: f64,
    /// Examples whose transcript could not be aligned for CTC.
    pub ctc_infeasible: usize,
}

impl LossBreakdown {
    pub fn mlm(&self) -> f64 {
        self.speech + self.src + self.tgt
    }

    pub fn weighted_sum(&self) -> f64 {
        let w = &self.weights;
        w.st * self.st + w.mt * self.mt + w.mlm * self.mlm() + w.ctc * self.ctc
    }

    pub const CSV_HEADER: &'static str = "step,flavor,speech,src,tgt,mlm,st,mt,ctc,total";

    pub fn csv_row(&self, step: u64, flavor: &str) -> String {
        let mut s = format!("{step},{flavor}");
        for v in [self.speech, self.src, self.tgt, self.mlm(), self.st, self.mt, self.ctc, self.total] {
            let _ = write!(s, ",{v:e}");
        }
        s
    }
}

/// Per-step CSV log of loss breakdowns.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{}", LossBreakdown::CSV_HEADER)?;
        Ok(LossLog { out })
    }

    /// Continue an existing log without repeating the header.
    pub fn continuing(out: W) -> Self {
        LossLog { out }
    }

    pub fn append(&mut self, step: u64, flavor: &str, b: &LossBreakdown) -> io::Result<()> {
        writeln!(self.out, "{}", b.csv_row(step, flavor))?;
        self.out.flush()
    }
}

/// Parse a row written by [`LossLog`] back into `(step, flavor, terms)`;
/// terms are speech, src, tgt, mlm, st, mt, ctc, total.
pub fn parse_csv_row(line: &str) -> Option<(u64, String, [f64; 8])> {
    let mut parts = line.split(',');
    let step = parts.next()?.parse().ok()?;
    let flavor = parts.next()?.to_string();
    let mut vals = [0.0; 8];
    for v in vals.iter_mut() {
        *v = parts.next()?.parse().ok()?;
    }
    parts.next().is_none().then_some((step, flavor, vals))
}

fn zero<F: Real>(tape: &Tape<F>) -> Var {
    tape.constant(Tensor::scalar(F::zero()))
}

fn sum_vars<F: Real>(tape: &Tape<F>, vs: &[Var]) -> Result<Var, ModelError> {
    let mut it = vs.iter().copied();
    let Some(mut acc) = it.next() else { return Ok(zero(tape)) };
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Squared error summed over the feature axis, averaged over masked frames.
/// Zero (a constant) when nothing is masked.
pub fn loss_speech_recon<F: Real>(tape: &Tape<F>, target: Var, predicted: Var, mask: &[bool]) -> Result<Var, ModelError> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(zero(tape));
    }
    recon_term(tape, target, predicted, mask, F::c(1.0 / n as f64))
}

fn recon_term<F: Real>(tape: &Tape<F>, target: Var, predicted: Var, mask: &[bool], scale: F) -> Result<Var, ModelError> {
    let w: Vec<F> = mask.iter().map(|&m| if m { scale } else { F::zero() }).collect();
    Ok(tape.weighted_sq_err(predicted, target, &w)?)
}

/// Mean cross-entropy over masked positions only; zero when nothing is masked.
pub fn loss_masked_tokens<F: Real>(
    tape: &Tape<F>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    smoothing: f64,
) -> Result<Var, ModelError> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(zero(tape));
    }
    token_term(tape, logits, targets, mask, F::c(1.0 / n as f64), smoothing)
}

fn token_term<F: Real>(tape: &Tape<F>, logits: Var, targets: &[usize], mask: &[bool], scale: F, smoothing: f64) -> Result<Var, ModelError> {
    let w: Vec<F> = mask.iter().map(|&m| if m { scale } else { F::zero() }).collect();
    Ok(tape.cross_entropy_weighted(logits, targets, &w, F::c(smoothing))?)
}

/// CTC result for one utterance: the NLL, or `+∞` with `infeasible` set when
/// the label needs more frames than are available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtcOutcome {
    pub loss: f64,
    pub infeasible: bool,
}

/// CTC negative log-likelihood of `labels` under row-normalized `log_probs: [T', C]`.
pub fn loss_ctc(log_probs: &Tensor<f64>, labels: &[usize], blank: usize) -> CtcOutcome {
    match ctc::ctc_forward_backward(log_probs.data(), log_probs.rows(), log_probs.cols(), labels, blank) {
        Some((nll, _)) => CtcOutcome {
            loss: nll,
            infeasible: false,
        },
        None => CtcOutcome {
            loss: f64::INFINITY,
            infeasible: true,
        },
    }
}

/// Masks drawn for one example of a FAT-MLM batch.
#[derive(Debug, Clone)]
pub struct ExampleMasks {
    pub speech: Option<MaskPlan>,
    pub src: Option<MaskPlan>,
    pub tgt: Option<MaskPlan>,
}

/// Draw masks for every visible modality of every example, keyed by
/// `(seed, example index, modality)`.
pub fn draw_masks(batch: &Batch, lambda: f64, span_len: usize, seed: u64) -> Vec<ExampleMasks> {
    batch
        .examples
        .iter()
        .enumerate()
        .map(|(i, v)| ExampleMasks {
            speech: v.speech().map(|s| mask_span(s.num_frames(), lambda, span_len, mix(&[seed, i as u64, 0]))),
            src: v.transcription().map(|t| mask_token(t.len(), lambda, mix(&[seed, i as u64, 1]))),
            tgt: v.translation().map(|t| mask_token(t.len(), lambda, mix(&[seed, i as u64, 2]))),
        })
        .collect()
}

/// Tape handles of the three FAT-MLM terms; `None` when the modality is
/// absent from the batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct MlmTerms {
    pub speech: Option<Var>,
    pub src: Option<Var>,
    pub tgt: Option<Var>,
}

/// Mask every visible modality, fuse-encode the concatenation and score the
/// reconstruction of masked positions. Each term is pooled over the batch:
/// divided by the batch's total number of masked frames (or tokens).
pub fn loss_fat_mlm<F: Real>(ctx: &Ctx<F>, batch: &Batch, smoothing: f64, seed: u64) -> Result<MlmTerms, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::NoSegments);
    }
    let cfg = &ctx.model.config;
    let tape = ctx.tape;
    let masks = draw_masks(batch, cfg.mask_lambda, cfg.mask_span_len, seed);
    let total = |f: fn(&ExampleMasks) -> Option<&MaskPlan>| masks.iter().filter_map(f).map(MaskPlan::count).sum::<usize>();
    let (ns, nx, ny) = (total(|m| m.speech.as_ref()), total(|m| m.src.as_ref()), total(|m| m.tgt.as_ref()));
    let (mut ts, mut tx, mut ty) = (Vec::new(), Vec::new(), Vec::new());
    for (view, m) in batch.examples.iter().zip(&masks) {
        let speech = match (view.speech(), &m.speech) {
            (Some(s), Some(p)) => Some((ctx.spectrogram(s), ctx.acoustic_embed(ctx.spectrogram(s), Some(&p.indicator))?, p)),
            _ => None,
        };
        let src = match (view.transcription(), &m.src) {
            (Some(t), Some(p)) => Some((t, ctx.text_embed(&t.ids, Some(&p.indicator))?, p)),
            _ => None,
        };
        let tgt = match (view.translation(), &m.tgt) {
            (Some(t), Some(p)) => Some((t, ctx.text_embed(&t.ids, Some(&p.indicator))?, p)),
            _ => None,
        };
        let states = ctx.fuse_encode(
            speech.as_ref().map(|s| s.1.states),
            src.as_ref().map(|s| s.1),
            tgt.as_ref().map(|s| s.1),
        )?;
        if let Some((target, enc, p)) = &speech {
            if p.count() > 0 {
                let pred = ctx.reconstruct_speech(&states, enc.frames)?;
                ts.push(recon_term(tape, *target, pred, &p.indicator, F::c(1.0 / ns as f64))?);
            }
        }
        for (part, seg, n, acc) in [(&src, Segment::Src, nx, &mut tx), (&tgt, Segment::Tgt, ny, &mut ty)] {
            if let Some((t, _, p)) = part {
                if p.count() > 0 {
                    let logits = ctx.predict_tokens(&states, seg)?;
                    acc.push(token_term(tape, logits, &t.ids, &p.indicator, F::c(1.0 / n as f64), smoothing)?);
                }
            }
        }
    }
    let f = batch.flavor;
    Ok(MlmTerms {
        speech: f.has_s().then(|| sum_vars(tape, &ts)).transpose()?,
        src: f.has_x().then(|| sum_vars(tape, &tx)).transpose()?,
        tgt: f.has_y().then(|| sum_vars(tape, &ty)).transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Speech,
    Text,
}

/// Token-mean translation NLL and, for speech sources, pooled CTC over
/// examples that carry a transcription.
#[derive(Debug, Clone, Copy)]
pub struct Seq2SeqTerms {
    pub nll: Var,
    pub ctc: Option<Var>,
    pub ctc_infeasible: usize,
}

/// Decoder input (bos-prefixed) and targets (eos-suffixed) for a reference.
pub fn teacher_forcing(reference: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(reference.len() + 1);
    input.push(BOS);
    input.extend_from_slice(reference);
    let mut target = reference.to_vec();
    target.push(EOS);
    (input, target)
}

pub fn loss_seq2seq<F: Real>(
    ctx: &Ctx<F>,
    batch: &Batch,
    source: Source,
    with_ctc: bool,
    smoothing: f64,
) -> Result<Seq2SeqTerms, ModelError> {
    let tape = ctx.tape;
    let cfg = &ctx.model.config;
    let n_tokens: usize = batch.examples.iter().filter_map(|v| v.translation()).map(|t| t.len() + 1).sum();
    let ctc_labels = |v: &crate::corpus::ExampleView| -> Option<Vec<usize>> {
        let s = v.speech()?;
        let labels = v.example.transcription.as_ref()?.ids.clone();
        let latent = cfg.downsampled_len(s.num_frames()).ok()?;
        (ctc_min_frames(&labels) <= latent).then_some(labels)
    };
    let want_ctc = with_ctc && source == Source::Speech;
    let with_transcript = batch.examples.iter().filter(|v| v.example.transcription.is_some()).count();
    let feasible = if want_ctc { batch.examples.iter().filter(|v| ctc_labels(v).is_some()).count() } else { 0 };
    let mut nll = Vec::new();
    let mut ctc_terms = Vec::new();
    for view in &batch.examples {
        let Some(y) = view.translation() else { continue };
        let (memory, speech) = match source {
            Source::Speech => {
                let s = view.speech().ok_or(ModelError::MissingSegment(Segment::Speech))?;
                let (st, sp) = ctx.encode_speech_source(ctx.spectrogram(s))?;
                (st.hidden, Some(sp))
            }
            Source::Text => {
                let x = view.transcription().ok_or(ModelError::MissingSegment(Segment::Src))?;
                (ctx.encode_text_source(&x.ids)?.hidden, None)
            }
        };
        let (input, target) = teacher_forcing(&y.ids);
        let logits = ctx.decode(memory, &input)?;
        let w = vec![F::c(1.0 / n_tokens as f64); target.len()];
        nll.push(tape.cross_entropy_weighted(logits, &target, &w, F::c(smoothing))?);
        if let (true, Some(sp), Some(labels)) = (want_ctc, speech, ctc_labels(view)) {
            let lp = ctx.ctc_head(&sp)?;
            let c = tape.ctc_loss(lp, &labels, cfg.vocab_size)?;
            ctc_terms.push(tape.scale(c, F::c(1.0 / feasible as f64)));
        }
    }
    Ok(Seq2SeqTerms {
        nll: sum_vars(tape, &nll)?,
        ctc: (want_ctc && feasible > 0).then(|| sum_vars(tape, &ctc_terms)).transpose()?,
        ctc_infeasible: if want_ctc { with_transcript - feasible } else { 0 },
    })
}

/// Weighted FAT-ST objective over optional ST, MT and FAT-MLM sub-batches.
/// With only FAT-MLM batches this is the pretraining objective.
pub fn loss_fat_st<F: Real>(
    ctx: &Ctx<F>,
    st: Option<&Batch>,
    mt: Option<&Batch>,
    mlm: &[&Batch],
    weights: LossWeights,
    smoothing: f64,
    seed: u64,
) -> Result<(Var, LossBreakdown), ModelError> {
    if st.is_none() && mt.is_none() && mlm.is_empty() {
        return Err(ModelError::NoSegments);
    }
    let tape = ctx.tape;
    let val = |v: Var| tape.scalar_value(v).f64();
    let mut b = LossBreakdown {
        weights,
        ..Default::default()
    };
    let mut parts: Vec<Var> = Vec::new();
    if let Some(batch) = st {
        let t = loss_seq2seq(ctx, batch, Source::Speech, weights.ctc != 0.0, smoothing)?;
        b.st = val(t.nll);
        parts.push(tape.scale(t.nll, F::c(weights.st)));
        if let Some(c) = t.ctc {
            b.ctc = val(c);
            parts.push(tape.scale(c, F::c(weights.ctc)));
        }
        b.ctc_infeasible = t.ctc_infeasible;
    }
    if let Some(batch) = mt {
        let t = loss_seq2seq(ctx, batch, Source::Text, false, smoothing)?;
        b.mt = val(t.nll);
        parts.push(tape.scale(t.nll, F::c(weights.mt)));
    }
    for (i, batch) in mlm.iter().enumerate() {
        let t = loss_fat_mlm(ctx, batch, smoothing, mix(&[seed, i as u64]))?;
        for (term, slot) in [(t.speech, &mut b.speech), (t.src, &mut b.src), (t.tgt, &mut b.tgt)] {
            if let Some(v) = term {
                *slot += val(v);
                parts.push(tape.scale(v, F::c(weights.mlm)));
            }
        }
    }
    b.total = b.weighted_sum();
    Ok((sum_vars(tape, &parts)?, b))
}
