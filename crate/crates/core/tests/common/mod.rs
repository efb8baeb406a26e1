#![allow(dead_code)]

pub mod gradients;

use std::sync::Arc;

use fatspeech::corpus::{Batch, ExampleView, Flavor, MultimodalExample};
use fatspeech::features::Spectrogram;
use fatspeech::inference::{DecodeModel, EncodedSource};
use fatspeech::model::{Model, ModelConfig, ModelError};
use fatspeech::numerics::TensorError;
use fatspeech::subword::{Lang, TokenSequence, RESERVED, UNK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 12;
pub const D_S: usize = 8;

/// A very small configuration for gradient checks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        acoustic_layers: 1,
        shared_layers: 1,
        dec_layers: 1,
        ffn_dim: 12,
        conv_channels: 2,
        ..ModelConfig::tiny(VOCAB, D_S)
    }
}

pub fn random_example(id: &str, frames: usize, x_len: usize, y_len: usize, vocab: usize, d_s: usize, seed: u64) -> Arc<MultimodalExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * d_s).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut ids = |n: usize| (0..n).map(|_| rng.gen_range(RESERVED.len()..vocab)).collect::<Vec<_>>();
    let x = ids(x_len);
    let y = ids(y_len);
    Arc::new(MultimodalExample {
        id: id.into(),
        speech: (frames > 0).then(|| Spectrogram::from_rows(frames, d_s, data).unwrap()),
        transcription: (x_len > 0).then(|| TokenSequence::new(x, Lang::Src)),
        translation: (y_len > 0).then(|| TokenSequence::new(y, Lang::Tgt)),
    })
}

pub fn batch_of(examples: &[Arc<MultimodalExample>], flavor: Flavor) -> Batch {
    Batch {
        flavor,
        examples: examples.iter().map(|e| ExampleView::restrict(e, flavor).expect("flavor present")).collect(),
    }
}

pub fn te(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

/// Frozen transformer restricted to three output tokens: eos and two words.
pub struct ThreeToken<'m>(pub EncodedSource<'m, f64>);

impl DecodeModel for ThreeToken<'_> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut lp = self.0.log_probs(prefix);
        lp[UNK] = f64::NEG_INFINITY;
        lp
    }
}

pub fn three_token_model(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        dec_layers: 1,
        shared_layers: 1,
        ..ModelConfig::tiny(7, 8)
    };
    let mut m = Model::<f64>::new(cfg, seed).unwrap();
    // Sharpen the output layer so distributions are far from uniform.
    let mut w = (**m.param("dec.out.w").unwrap()).clone();
    w.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    m.set_param("dec.out.w", w).unwrap();
    m
}
