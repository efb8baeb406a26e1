use std::fmt;

use super::{Ctx, ModelError, MIN_FRAMES};
use crate::features::Spectrogram;
use crate::numerics::{sinusoidal_positions, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Speech,
    Src,
    Tgt,
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::Speech => "speech",
            Segment::Src => "src",
            Segment::Tgt => "tgt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpan {
    pub segment: Segment,
    pub start: usize,
    pub len: usize,
}

/// Output of the shared encoder over `[speech; src; tgt]` (absent segments skipped).
#[derive(Debug, Clone)]
pub struct FusedStates {
    /// `[N, d_model]`.
    pub hidden: Var,
    pub spans: Vec<SegmentSpan>,
}

impl FusedStates {
    pub fn span(&self, segment: Segment) -> Option<SegmentSpan> {
        self.spans.iter().copied().find(|s| s.segment == segment)
    }

    pub fn len(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_map(&self) -> Vec<Segment> {
        self.spans.iter().flat_map(|s| std::iter::repeat_n(s.segment, s.len)).collect()
    }

    pub fn positions(&self) -> Vec<usize> {
        segment_positions(&self.spans.iter().map(|s| s.len).collect::<Vec<_>>())
    }
}

/// Position indices restarting at zero in every segment.
pub fn segment_positions(lens: &[usize]) -> Vec<usize> {
    lens.iter().flat_map(|&n| 0..n).collect()
}

/// Speech after convolutional downsampling and the lower transformer layers.
#[derive(Debug, Clone, Copy)]
pub struct EncodedSpeech {
    /// `[T', d_model]`.
    pub states: Var,
    pub frames: usize,
    pub latent: usize,
}

impl<F: Real> Ctx<'_, F> {
    pub fn spectrogram(&self, s: &Spectrogram) -> Var {
        self.tape.constant(s.features().cast())
    }

    fn add_positions(&self, x: Var) -> Result<Var, ModelError> {
        let n = self.tape.shape(x)[0];
        let pos: Vec<usize> = (0..n).collect();
        let pe = self.tape.constant(sinusoidal_positions(&pos, self.model.config.d_model));
        Ok(self.tape.add(x, pe)?)
    }

    fn lower_stack(&self, mut x: Var) -> Result<Var, ModelError> {
        for i in 0..self.model.config.acoustic_layers {
            x = self.encoder_layer(x, &format!("enc.acoustic.{i}"))?;
        }
        self.layer_norm(x, "enc.acoustic_ln")
    }

    /// Masked frames (`mask[t]`) are replaced by the learned speech mask
    /// vector before the convolutions.
    pub fn acoustic_embed(&self, frames: Var, mask: Option<&[bool]>) -> Result<EncodedSpeech, ModelError> {
        let cfg = &self.model.config;
        let shape = self.tape.shape(frames);
        if shape.len() != 2 || shape[1] != cfg.d_s {
            return Err(ModelError::FeatureDim {
                expected: cfg.d_s,
                found: shape.last().copied().unwrap_or(0),
            });
        }
        let t = shape[0];
        if t < MIN_FRAMES {
            return Err(ModelError::TooShort { frames: t, min: MIN_FRAMES });
        }
        let mut x = frames;
        if let Some(m) = mask.filter(|m| m.iter().any(|&b| b)) {
            x = self.tape.mask_rows(x, self.p("embed.mask_speech")?, m)?;
        }
        let x = self.tape.reshape(x, &[1, t, cfg.d_s])?;
        let x = self.tape.conv2d(x, self.p("enc.conv1.w")?, self.p("enc.conv1.b")?, 2, 1)?;
        let x = self.tape.relu(x);
        let x = self.tape.conv2d(x, self.p("enc.conv2.w")?, self.p("enc.conv2.b")?, 2, 1)?;
        let x = self.tape.relu(x);
        let s = self.tape.shape(x);
        let (c, latent, fo) = (s[0], s[1], s[2]);
        let x = self.tape.permute(x, &[1, 0, 2])?;
        let x = self.tape.reshape(x, &[latent, c * fo])?;
        let x = self.linear(x, "enc.conv_proj")?;
        let x = self.dropout(self.add_positions(x)?)?;
        let states = self.lower_stack(x)?;
        Ok(EncodedSpeech { states, frames: t, latent })
    }

    /// Token embeddings with masked positions replaced by the learned token
    /// mask vector, scaled by √d, plus positions. Unless the model is
    /// hierarchical the lower layers are applied as well.
    pub fn text_embed(&self, ids: &[usize], mask: Option<&[bool]>) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let mut x = self.tape.gather(self.p("embed.tokens")?, ids)?;
        if let Some(m) = mask.filter(|m| m.iter().any(|&b| b)) {
            x = self.tape.mask_rows(x, self.p("embed.mask_token")?, m)?;
        }
        let x = self.tape.scale(x, F::c((cfg.d_model as f64).sqrt()));
        let x = self.dropout(self.add_positions(x)?)?;
        if cfg.hierarchical {
            Ok(x)
        } else {
            self.lower_stack(x)
        }
    }

    /// Concatenate the present segments (adding language embeddings in
    /// translation mode) and run the shared layers with full attention.
    pub fn fuse_encode(&self, speech: Option<Var>, src: Option<Var>, tgt: Option<Var>) -> Result<FusedStates, ModelError> {
        let cfg = &self.model.config;
        let mut parts = Vec::new();
        let mut spans = Vec::new();
        let mut start = 0;
        for (seg, v) in [(Segment::Speech, speech), (Segment::Src, src), (Segment::Tgt, tgt)] {
            let Some(mut v) = v else { continue };
            let len = self.tape.shape(v)[0];
            if len == 0 {
                continue;
            }
            if cfg.lang_embed {
                let e = if seg == Segment::Tgt { "embed.lang_tgt" } else { "embed.lang_src" };
                v = self.tape.add(v, self.p(e)?)?;
            }
            parts.push(v);
            spans.push(SegmentSpan { segment: seg, start, len });
            start += len;
        }
        if parts.is_empty() {
            return Err(ModelError::NoSegments);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { self.tape.concat(&parts, 0)? };
        for i in 0..cfg.shared_layers {
            x = self.encoder_layer(x, &format!("enc.shared.{i}"))?;
        }
        let hidden = self.layer_norm(x, "enc.ln")?;
        Ok(FusedStates { hidden, spans })
    }

    fn segment_rows(&self, states: &FusedStates, seg: Segment) -> Result<Var, ModelError> {
        let span = states.span(seg).ok_or(ModelError::MissingSegment(seg))?;
        if span.start == 0 && span.len == states.len() {
            return Ok(states.hidden);
        }
        Ok(self.tape.slice(states.hidden, 0, span.start, span.start + span.len)?)
    }

    /// Projection plus two stride-2 transposed convolutions, cropped to
    /// `frames × d_s`.
    pub fn reconstruct_speech(&self, states: &FusedStates, frames: usize) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let h = self.segment_rows(states, Segment::Speech)?;
        let latent = self.tape.shape(h)[0];
        let (c, fo) = (cfg.conv_channels, cfg.conv_freq_out());
        let x = self.linear(h, "head.recon.proj")?;
        let x = self.tape.reshape(x, &[latent, c, fo])?;
        let x = self.tape.permute(x, &[1, 0, 2])?;
        let x = self.tape.conv_transpose2d(x, self.p("head.recon.deconv1.w")?, self.p("head.recon.deconv1.b")?, 2, 0)?;
        let x = self.tape.relu(x);
        let x = self.tape.conv_transpose2d(x, self.p("head.recon.deconv2.w")?, self.p("head.recon.deconv2.b")?, 2, 0)?;
        let s = self.tape.shape(x);
        if s[1] < frames || s[2] < cfg.d_s {
            return Err(ModelError::Format(format!("reconstruction {s:?} smaller than {frames}×{}", cfg.d_s)));
        }
        let x = self.tape.slice(x, 1, 0, frames)?;
        let x = self.tape.slice(x, 2, 0, cfg.d_s)?;
        Ok(self.tape.reshape(x, &[frames, cfg.d_s])?)
    }

    /// Vocabulary logits for one text segment through the (tied) output projection.
    pub fn predict_tokens(&self, states: &FusedStates, seg: Segment) -> Result<Var, ModelError> {
        if seg == Segment::Speech {
            return Err(ModelError::MissingSegment(seg));
        }
        let h = self.segment_rows(states, seg)?;
        if self.model.config.tie_embeddings {
            let logits = self.tape.matmul_ext(h, self.p("embed.tokens")?, true)?;
            Ok(self.tape.add(logits, self.p("head.token.b")?)?)
        } else {
            self.linear(h, "head.token")
        }
    }

    /// Per-latent-frame log-probabilities over the vocabulary plus blank (id V).
    pub fn ctc_head(&self, speech: &EncodedSpeech) -> Result<Var, ModelError> {
        let logits = self.linear(speech.states, "head.ctc")?;
        Ok(self.tape.log_softmax(logits))
    }

    /// Unmasked encoding of a translation source for the decoder.
    pub fn encode_speech_source(&self, frames: Var) -> Result<(FusedStates, EncodedSpeech), ModelError> {
        let sp = self.acoustic_embed(frames, None)?;
        Ok((self.fuse_encode(Some(sp.states), None, None)?, sp))
    }

    pub fn encode_text_source(&self, ids: &[usize]) -> Result<FusedStates, ModelError> {
        let x = self.text_embed(ids, None)?;
        self.fuse_encode(None, Some(x), None)
    }
}
