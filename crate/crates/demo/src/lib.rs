//! Browser bindings: log-mel features of a synthetic chirp, span-mask
//! sampling, and encoder attention maps of a toy model.

use std::f64::consts::PI;
use std::sync::Arc;

use fatspeech::attention::{diagonal_mass, encoder_attention};
use fatspeech::corpus::{Dataset, MultimodalExample};
use fatspeech::features::{waveform_to_log_mel, Waveform};
use fatspeech::masking::{mask_span, mask_token};
use fatspeech::model::{Model, ModelConfig, Segment};
use fatspeech::numerics::{Real, Tensor};
use fatspeech::synth::{generate, to_dataset, vocabulary, SynthConfig};
use fatspeech::trainer::{pretrain_model_config, TrainConfig, Trainer};
use wasm_bindgen::prelude::*;

const SAMPLE_RATE: u32 = 16_000;
const D_S: usize = 20;

/// Row-major matrix handed to JavaScript.
#[wasm_bindgen]
#[derive(Clone)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

#[wasm_bindgen]
impl Matrix {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> Vec<f32> {
        self.data.clone()
    }

    /// Mean row mass within `band` of the rescaled diagonal.
    pub fn diagonal(&self, band: usize) -> f64 {
        let w = Tensor::new(&[self.rows, self.cols], self.data.iter().map(|&v| v as f64).collect()).expect("matrix shape");
        diagonal_mass(&w, band)
    }
}

impl Matrix {
    fn from_tensor<F: Real>(t: &Tensor<F>) -> Self {
        let t: Tensor<f32> = t.cast();
        Matrix {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Log-mel spectrogram `[frames, n_mels]` of a linear chirp from `f0` to `f1` Hz.
#[wasm_bindgen]
pub fn chirp_log_mel(f0: f64, f1: f64, duration_ms: u32, n_mels: usize) -> Result<Matrix, JsError> {
    let n = (SAMPLE_RATE as u64 * duration_ms as u64 / 1000) as usize;
    let dur = n as f64 / SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            (0.5 * (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur))).sin()) as f32
        })
        .collect();
    let w = Waveform::new(samples, SAMPLE_RATE).map_err(js)?;
    let s = waveform_to_log_mel(&w, n_mels).map_err(js)?;
    Ok(Matrix::from_tensor(s.features()))
}

/// Mask indicator (1 = masked) over `len` positions.
#[wasm_bindgen]
pub fn sample_mask(len: usize, lambda: f64, span_len: usize, seed: u32, spans: bool) -> Vec<u8> {
    let plan = if spans { mask_span(len, lambda, span_len, seed.into()) } else { mask_token(len, lambda, seed.into()) };
    plan.indicator.into_iter().map(u8::from).collect()
}

/// A toy utterance and its spectrogram `[frames, d_s]`.
#[wasm_bindgen]
pub struct ToyUtterance {
    text: String,
    spectrogram: Matrix,
}

#[wasm_bindgen]
impl ToyUtterance {
    #[wasm_bindgen(getter)]
    pub fn text(&self) -> String {
        self.text.clone()
    }

    pub fn spectrogram(&self) -> Matrix {
        self.spectrogram.clone()
    }
}

fn toy_pairs(seed: u64) -> Result<Dataset, JsError> {
    let vocab = vocabulary().map_err(js)?;
    let ds = to_dataset(&generate(&SynthConfig { examples: 32, d_s: D_S, seed, ..Default::default() }), &vocab);
    Ok(Dataset {
        examples: ds.examples.iter().map(|e| Arc::new(MultimodalExample { translation: None, ..(**e).clone() })).collect(),
    })
}

#[wasm_bindgen]
pub fn toy_utterance(seed: u32) -> ToyUtterance {
    let ex = generate(&SynthConfig { examples: 1, d_s: D_S, seed: seed.into(), ..Default::default() }).remove(0);
    ToyUtterance {
        text: ex.src,
        spectrogram: Matrix::from_tensor(ex.speech.features()),
    }
}

/// Toy encoder that can be pretrained a few steps at a time in the page.
#[wasm_bindgen]
pub struct ToyEncoder {
    trainer: Trainer,
    data: Dataset,
}

#[wasm_bindgen]
impl ToyEncoder {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<ToyEncoder, JsError> {
        let seed = u64::from(seed);
        let data = toy_pairs(seed)?;
        let config = pretrain_model_config(ModelConfig::tiny(vocabulary().map_err(js)?.len(), D_S), &data);
        let model = Model::<f32>::new(config, seed).map_err(js)?;
        let cfg = TrainConfig {
            steps: u64::MAX,
            lr: 0.2,
            warmup: 50,
            seed,
            ..Default::default()
        };
        let trainer = Trainer::pretrain(model, cfg, &data, 0).map_err(js)?;
        Ok(ToyEncoder { trainer, data })
    }

    #[wasm_bindgen(getter)]
    pub fn step(&self) -> u32 {
        self.trainer.step() as u32
    }

    /// Run `n` pretraining steps; returns the last total loss.
    pub fn train(&mut self, n: u32) -> Result<f64, JsError> {
        let mut last = f64::NAN;
        for _ in 0..n {
            last = self.trainer.train_step().map_err(js)?.breakdown.total;
        }
        Ok(last)
    }

    /// Speech-to-speech attention of one head for training example `example`.
    /// `stack` is `acoustic` or `shared`.
    pub fn attention(&self, example: usize, stack: &str, layer: usize, head: usize) -> Result<Matrix, JsError> {
        let ex = self.data.examples.get(example).ok_or_else(|| js(format!("no example {example}")))?;
        let dumps = encoder_attention(&self.trainer.model, ex, Some(&[layer]), Some(&[head])).map_err(js)?;
        dumps
            .iter()
            .find(|d| d.stack == stack && d.query == Segment::Speech && d.key == Segment::Speech)
            .map(|d| Matrix::from_tensor(&d.weights))
            .ok_or_else(|| js(format!("no {stack} attention at layer {layer}, head {head}")))
    }
}
