//! Toy corpora: each source word has a fixed spectral signature and a fixed
//! target-language counterpart, so speech, transcription and translation
//! are mutually predictable.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::corpus::{Dataset, MultimodalExample};
use crate::features::{save_features, Spectrogram};
use crate::subword::{train_bpe, Lang, SubwordError, Vocabulary};

pub const SRC_WORDS: [&str; 10] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
pub const TGT_WORDS: [&str; 10] = ["q", "r", "s", "t", "u", "v", "w", "x", "y", "z"];

/// Word-level translation table: source word `k` maps to `TGT_WORDS[(3k + 1) % 10]`.
pub fn translate_word(k: usize) -> usize {
    (3 * k + 1) % TGT_WORDS.len()
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub examples: usize,
    pub d_s: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_frames: usize,
    pub max_word_frames: usize,
    pub gap_frames: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            examples: 32,
            d_s: 20,
            min_words: 2,
            max_words: 6,
            min_word_frames: 6,
            max_word_frames: 10,
            gap_frames: 2,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Longest utterance the configuration can produce.
    pub fn max_frames(&self) -> usize {
        self.max_words * (self.max_word_frames + self.gap_frames) + self.gap_frames
    }
}

#[derive(Debug, Clone)]
pub struct SynthExample {
    pub id: String,
    pub words: Vec<usize>,
    pub speech: Spectrogram,
    pub src: String,
    pub tgt: String,
}

/// Frequency bands lit by source word `k`.
pub fn word_bands(k: usize, d_s: usize) -> std::ops::Range<usize> {
    let width = (d_s / SRC_WORDS.len()).max(1);
    let start = (k * d_s / SRC_WORDS.len()).min(d_s - width);
    start..start + width
}

pub fn generate(cfg: &SynthConfig) -> Vec<SynthExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite std");
    (0..cfg.examples)
        .map(|i| {
            let n = rng.gen_range(cfg.min_words..=cfg.max_words);
            let words: Vec<usize> = (0..n).map(|_| rng.gen_range(0..SRC_WORDS.len())).collect();
            let mut rows: Vec<f32> = Vec::new();
            let mut push = |rng: &mut ChaCha8Rng, bands: Option<std::ops::Range<usize>>| {
                for b in 0..cfg.d_s {
                    let on = bands.as_ref().is_some_and(|r| r.contains(&b));
                    rows.push((if on { 1.0 } else { 0.0 } + noise.sample(rng)) as f32);
                }
            };
            for _ in 0..cfg.gap_frames {
                push(&mut rng, None);
            }
            for &w in &words {
                for _ in 0..rng.gen_range(cfg.min_word_frames..=cfg.max_word_frames) {
                    push(&mut rng, Some(word_bands(w, cfg.d_s)));
                }
                for _ in 0..cfg.gap_frames {
                    push(&mut rng, None);
                }
            }
            let frames = rows.len() / cfg.d_s;
            SynthExample {
                id: format!("synth-{i:05}"),
                speech: Spectrogram::from_rows(frames, cfg.d_s, rows).expect("consistent rows"),
                src: words.iter().map(|&w| SRC_WORDS[w]).collect::<Vec<_>>().join(" "),
                tgt: words.iter().map(|&w| TGT_WORDS[translate_word(w)]).collect::<Vec<_>>().join(" "),
                words,
            }
        })
        .collect()
}

/// Joint vocabulary in which every toy word is a single piece.
pub fn vocabulary() -> Result<Vocabulary, SubwordError> {
    let all: Vec<&str> = SRC_WORDS.iter().chain(TGT_WORDS.iter()).copied().collect();
    let line = all.join(" ");
    // reserved + word-start marker + one letter and one merge per word
    train_bpe(&[line], 5 + 1 + 2 * all.len())
}

pub fn to_dataset(examples: &[SynthExample], vocab: &Vocabulary) -> Dataset {
    Dataset {
        examples: examples
            .iter()
            .map(|e| {
                Arc::new(MultimodalExample {
                    id: e.id.clone(),
                    speech: Some(e.speech.clone()),
                    transcription: Some(vocab.encode(&e.src, Lang::Src)),
                    translation: Some(vocab.encode(&e.tgt, Lang::Tgt)),
                })
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct Record<'a> {
    id: &'a str,
    feats: String,
    text_src: &'a str,
    text_tgt: &'a str,
}

/// Write `<dir>/<name>.jsonl` plus one feature file per utterance under
/// `<dir>/feats/`. Returns the manifest path.
pub fn write_manifest(examples: &[SynthExample], dir: &Path, name: &str) -> std::io::Result<PathBuf> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats)?;
    let mut out = String::new();
    for e in examples {
        let rel = format!("feats/{}.fatf", e.id);
        save_features(dir.join(&rel), &e.speech).map_err(std::io::Error::other)?;
        let rec = Record {
            id: &e.id,
            feats: rel,
            text_src: &e.src,
            text_tgt: &e.tgt,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    let path = dir.join(format!("{name}.jsonl"));
    fs::write(&path, out)?;
    Ok(path)
}
