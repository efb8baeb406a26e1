//! Encoder self-attention export: per-layer, per-head matrices split by
//! segment pair, written as CSV and 8-bit PGM heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::corpus::MultimodalExample;
use crate::model::{AttentionRecord, Ctx, Model, ModelError, Segment, SegmentSpan};
use crate::numerics::{Real, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    /// `acoustic` (lower layers, one segment at a time) or `shared` (fused).
    pub stack: &'static str,
    pub layer: usize,
    pub head: usize,
    pub query: Segment,
    pub key: Segment,
    /// `[queries, keys]`; each row sums to 1.
    pub weights: Tensor<f64>,
}

impl AttentionDump {
    pub fn file_stem(&self) -> String {
        format!("attn_{}_l{}_h{}_{}-{}", self.stack, self.layer, self.head, self.query, self.key)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.weights.rows() {
            let row: Vec<String> = self.weights.row(i).iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Binary PGM, one pixel per weight, each row scaled by its maximum.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (h, w) = (self.weights.rows(), self.weights.cols());
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for i in 0..h {
            let row = self.weights.row(i);
            let max = row.iter().copied().fold(0.0, f64::max);
            out.extend(row.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }));
        }
        out
    }
}

fn layer_of(block: &str, prefix: &str) -> Option<usize> {
    block.strip_prefix(prefix)?.strip_suffix(".attn")?.parse().ok()
}

/// Sub-block `[q_span, k_span]` of one head with rows renormalized, so a
/// cross-segment block reads as attention conditioned on that key segment.
fn block(probs: &Tensor<f64>, head: usize, q: SegmentSpan, k: SegmentSpan) -> Tensor<f64> {
    let (n_q, n_k) = (probs.shape()[1], probs.shape()[2]);
    let base = head * n_q * n_k;
    let mut data = Vec::with_capacity(q.len * k.len);
    for i in q.start..q.start + q.len {
        let row = &probs.data()[base + i * n_k + k.start..base + i * n_k + k.start + k.len];
        let z: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| if z > 0.0 { v / z } else { 1.0 / k.len as f64 }));
    }
    Tensor::new(&[q.len, k.len], data).expect("block shape")
}

fn whole(len: usize, segment: Segment) -> SegmentSpan {
    SegmentSpan { segment, start: 0, len }
}

/// Attention of every encoder layer over every present segment of `example`
/// (no masking). `layers` and `heads` filter the output when given.
pub fn encoder_attention<F: Real>(
    model: &Model<F>,
    example: &MultimodalExample,
    layers: Option<&[usize]>,
    heads: Option<&[usize]>,
) -> Result<Vec<AttentionDump>, ModelError> {
    let tape = Tape::<F>::new();
    let ctx = Ctx::eval(&tape, model).record_attention();
    let keep = |l: usize, h: usize| layers.is_none_or(|ls| ls.contains(&l)) && heads.is_none_or(|hs| hs.contains(&h));
    let mut out = Vec::new();
    let lower = |recs: Vec<AttentionRecord<F>>, seg: Segment, out: &mut Vec<AttentionDump>| {
        for r in recs {
            let Some(l) = layer_of(&r.block, "enc.acoustic.") else { continue };
            let probs: Tensor<f64> = r.probs.cast();
            let n = probs.shape()[1];
            for h in (0..probs.shape()[0]).filter(|&h| keep(l, h)) {
                out.push(AttentionDump {
                    stack: "acoustic",
                    layer: l,
                    head: h,
                    query: seg,
                    key: seg,
                    weights: block(&probs, h, whole(n, seg), whole(n, seg)),
                });
            }
        }
    };
    let speech = match &example.speech {
        Some(s) => {
            let e = ctx.acoustic_embed(ctx.spectrogram(s), None)?;
            lower(ctx.take_attention(), Segment::Speech, &mut out);
            Some(e.states)
        }
        None => None,
    };
    let text = |seq: Option<&crate::subword::TokenSequence>, seg: Segment, out: &mut Vec<AttentionDump>| -> Result<Option<_>, ModelError> {
        let Some(t) = seq.filter(|t| !t.is_empty()) else { return Ok(None) };
        let v = ctx.text_embed(&t.ids, None)?;
        lower(ctx.take_attention(), seg, out);
        Ok(Some(v))
    };
    let src = text(example.transcription.as_ref(), Segment::Src, &mut out)?;
    let tgt = text(example.translation.as_ref(), Segment::Tgt, &mut out)?;
    let fused = ctx.fuse_encode(speech, src, tgt)?;
    for r in ctx.take_attention() {
        let Some(l) = layer_of(&r.block, "enc.shared.") else { continue };
        let probs: Tensor<f64> = r.probs.cast();
        for h in (0..probs.shape()[0]).filter(|&h| keep(l, h)) {
            for &q in &fused.spans {
                for &k in &fused.spans {
                    out.push(AttentionDump {
                        stack: "shared",
                        layer: l,
                        head: h,
                        query: q.segment,
                        key: k.segment,
                        weights: block(&probs, h, q, k),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Write `<stem>.csv` and `<stem>.pgm` for each dump; returns the CSV paths.
pub fn write_dumps(dir: &Path, dumps: &[AttentionDump]) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(dumps.len());
    for d in dumps {
        let stem = d.file_stem();
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, d.to_csv())?;
        fs::write(dir.join(format!("{stem}.pgm")), d.to_pgm())?;
        paths.push(csv);
    }
    Ok(paths)
}

/// Mean attention mass within `band` positions of the (rescaled) diagonal.
pub fn diagonal_mass(w: &Tensor<f64>, band: usize) -> f64 {
    let (q, k) = (w.rows(), w.cols());
    if q == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..q {
        let c = if q > 1 { i as f64 * (k - 1) as f64 / (q - 1) as f64 } else { 0.0 };
        total += w
            .row(i)
            .iter()
            .enumerate()
            .filter(|(j, _)| (*j as f64 - c).abs() <= band as f64)
            .map(|(_, v)| v)
            .sum::<f64>();
    }
    total / q as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_mass_of_identity_and_uniform() {
        let eye = Tensor::<f64>::eye(6);
        assert!((diagonal_mass(&eye, 0) - 1.0).abs() < 1e-12);
        let uniform = Tensor::full(&[6, 6], 1.0 / 6.0);
        assert!((diagonal_mass(&uniform, 1) - (2.0 + 3.0 * 4.0 + 2.0) / 36.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_scales_each_row_by_its_max() {
        let d = AttentionDump {
            stack: "shared",
            layer: 0,
            head: 1,
            query: Segment::Speech,
            key: Segment::Src,
            weights: Tensor::new(&[2, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap(),
        };
        let pgm = d.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[85, 255, 255, 255]);
        assert_eq!(d.file_stem(), "attn_shared_l0_h1_speech-src");
    }
}
