//! Fused acoustic/text encoder, reconstruction and prediction heads, the
//! translation decoder, and checkpoints.

mod checkpoint;
mod decoder;
mod encoder;
mod layers;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_value, ConfigError, KvConfig};
use crate::masking::{DEFAULT_LAMBDA, DEFAULT_SPAN_LEN};
use crate::numerics::{conv2d_output_shape, Real, Tensor, TensorError};

pub use checkpoint::{average_checkpoints, init_fatst_from_fatmlm, Checkpoint, FATC_MAGIC, FATC_VERSION};
pub use encoder::{segment_positions, EncodedSpeech, FusedStates, Segment, SegmentSpan};
pub use layers::{AttentionRecord, Ctx};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("spectrogram of {frames} frames is shorter than the minimum {min}")]
    TooShort { frames: usize, min: usize },
    #[error("spectrogram feature dimension {found} does not match model d_s {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("no segment to encode")]
    NoSegments,
    #[error("segment `{0}` is not present")]
    MissingSegment(Segment),
    #[error("configuration mismatch in: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub const MIN_FRAMES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Lower encoder layers. Speech always passes through them; text does
    /// too unless `hierarchical`.
    pub acoustic_layers: usize,
    /// Upper encoder layers over the fused concatenation.
    pub shared_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub d_s: usize,
    pub vocab_size: usize,
    pub conv_channels: usize,
    pub dropout: f64,
    pub hierarchical: bool,
    pub tie_embeddings: bool,
    pub lang_embed: bool,
    pub mask_lambda: f64,
    pub mask_span_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            heads: 4,
            acoustic_layers: 6,
            shared_layers: 6,
            dec_layers: 6,
            ffn_dim: 2048,
            d_s: 80,
            vocab_size: crate::subword::DEFAULT_VOCAB_SIZE,
            conv_channels: 64,
            dropout: 0.1,
            hierarchical: false,
            tie_embeddings: true,
            lang_embed: false,
            mask_lambda: DEFAULT_LAMBDA,
            mask_span_len: DEFAULT_SPAN_LEN,
        }
    }
}

/// Keys that define parameter shapes; two checkpoints are compatible iff these agree.
pub const ARCHITECTURE_KEYS: [&str; 11] = [
    "model.d_model",
    "model.heads",
    "model.acoustic_layers",
    "model.shared_layers",
    "model.dec_layers",
    "model.ffn_dim",
    "model.d_s",
    "model.vocab_size",
    "model.conv_channels",
    "model.hierarchical",
    "model.tie_embeddings",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.ffn_dim < self.d_model {
            return bad("ffn_dim must be ≥ d_model");
        }
        if self.d_s == 0 || self.conv_channels == 0 {
            return bad("d_s and conv_channels must be positive");
        }
        if self.vocab_size <= crate::subword::RESERVED.len() {
            return bad("vocab_size must exceed the reserved tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mask_lambda) || self.mask_span_len == 0 {
            return bad("mask.lambda must be in [0, 1] and mask.span_len ≥ 1");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut c = KvConfig::default();
        c.set("model.d_model", self.d_model);
        c.set("model.heads", self.heads);
        c.set("model.acoustic_layers", self.acoustic_layers);
        c.set("model.shared_layers", self.shared_layers);
        c.set("model.dec_layers", self.dec_layers);
        c.set("model.ffn_dim", self.ffn_dim);
        c.set("model.d_s", self.d_s);
        c.set("model.vocab_size", self.vocab_size);
        c.set("model.conv_channels", self.conv_channels);
        c.set("model.dropout", self.dropout);
        c.set("model.hierarchical", self.hierarchical);
        c.set("model.tie_embeddings", self.tie_embeddings);
        c.set("model.lang_embed", self.lang_embed);
        c.set("mask.lambda", self.mask_lambda);
        c.set("mask.span_len", self.mask_span_len);
        c
    }

    /// Override fields from `model.*` and `mask.*` keys; other sections are ignored.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<(), ConfigError> {
        for (k, v) in kv.section("model").chain(kv.section("mask")) {
            match k {
                "model.d_model" => self.d_model = parse_value(k, v)?,
                "model.heads" => self.heads = parse_value(k, v)?,
                "model.acoustic_layers" => self.acoustic_layers = parse_value(k, v)?,
                "model.shared_layers" => self.shared_layers = parse_value(k, v)?,
                "model.dec_layers" => self.dec_layers = parse_value(k, v)?,
                "model.ffn_dim" => self.ffn_dim = parse_value(k, v)?,
                "model.d_s" => self.d_s = parse_value(k, v)?,
                "model.vocab_size" => self.vocab_size = parse_value(k, v)?,
                "model.conv_channels" => self.conv_channels = parse_value(k, v)?,
                "model.dropout" => self.dropout = parse_value(k, v)?,
                "model.hierarchical" => self.hierarchical = parse_value(k, v)?,
                "model.tie_embeddings" => self.tie_embeddings = parse_value(k, v)?,
                "model.lang_embed" => self.lang_embed = parse_value(k, v)?,
                "mask.lambda" => self.mask_lambda = parse_value(k, v)?,
                "mask.span_len" => self.mask_span_len = parse_value(k, v)?,
                _ => return Err(ConfigError::UnknownKey(k.to_string())),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let mut c = ModelConfig::default();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    /// Names of architecture fields that differ between `self` and `other`.
    pub fn architecture_mismatches(&self, other: &ModelConfig) -> Vec<String> {
        let (a, b) = (self.to_kv(), other.to_kv());
        ARCHITECTURE_KEYS
            .iter()
            .filter(|k| a.get(k) != b.get(k))
            .map(|k| format!("{k} ({} vs {})", a.get(k).unwrap_or("?"), b.get(k).unwrap_or("?")))
            .collect()
    }

    /// Frequency extent after the two stride-2 convolutions.
    pub fn conv_freq_out(&self) -> usize {
        let (_, f1) = conv2d_output_shape(MIN_FRAMES, self.d_s, 3, 2, 1).expect("d_s ≥ 1");
        conv2d_output_shape(MIN_FRAMES, f1, 3, 2, 1).expect("f1 ≥ 1").1
    }

    /// Latent frames after downsampling `frames` input frames.
    pub fn downsampled_len(&self, frames: usize) -> Result<usize, ModelError> {
        if frames < MIN_FRAMES {
            return Err(ModelError::TooShort { frames, min: MIN_FRAMES });
        }
        let (t1, _) = conv2d_output_shape(frames, self.d_s, 3, 2, 1)?;
        Ok(conv2d_output_shape(t1, self.d_s, 3, 2, 1)?.0)
    }

    /// A small configuration for tests, demos and toy corpora.
    pub fn tiny(vocab_size: usize, d_s: usize) -> Self {
        ModelConfig {
            d_model: 32,
            heads: 4,
            acoustic_layers: 1,
            shared_layers: 2,
            dec_layers: 2,
            ffn_dim: 64,
            d_s,
            vocab_size,
            conv_channels: 4,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
    Zeros,
    Ones,
}

fn push_linear(v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize) {
    v.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Xavier { fan_in, fan_out }));
    v.push((format!("{name}.b"), vec![fan_out], Init::Zeros));
}

fn push_ln(v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    v.push((format!("{name}.g"), vec![d], Init::Ones));
    v.push((format!("{name}.b"), vec![d], Init::Zeros));
}

fn push_attn(v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        push_linear(v, &format!("{name}.{p}"), d, d);
    }
}

fn push_ffn(v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize, f: usize) {
    push_linear(v, &format!("{name}.fc1"), d, f);
    push_linear(v, &format!("{name}.fc2"), f, d);
}

fn push_encoder_layer(v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, cfg: &ModelConfig) {
    push_ln(v, &format!("{name}.ln1"), cfg.d_model);
    push_attn(v, &format!("{name}.attn"), cfg.d_model);
    push_ln(v, &format!("{name}.ln2"), cfg.d_model);
    push_ffn(v, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_dim);
}

/// Every parameter of the architecture with its shape and initializer.
pub(crate) fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, c, v) = (cfg.d_model, cfg.conv_channels, cfg.vocab_size);
    let emb_std = (d as f64).powf(-0.5);
    let flat = c * cfg.conv_freq_out();
    let mut s = Vec::new();
    s.push(("embed.tokens".into(), vec![v, d], Init::Normal(emb_std)));
    s.push(("embed.mask_token".into(), vec![d], Init::Normal(emb_std)));
    s.push(("embed.mask_speech".into(), vec![cfg.d_s], Init::Normal(emb_std)));
    s.push(("embed.lang_src".into(), vec![d], Init::Normal(emb_std)));
    s.push(("embed.lang_tgt".into(), vec![d], Init::Normal(emb_std)));
    s.push(("enc.conv1.w".into(), vec![c, 1, 3, 3], Init::Xavier { fan_in: 9, fan_out: c * 9 }));
    s.push(("enc.conv1.b".into(), vec![c], Init::Zeros));
    s.push(("enc.conv2.w".into(), vec![c, c, 3, 3], Init::Xavier { fan_in: c * 9, fan_out: c * 9 }));
    s.push(("enc.conv2.b".into(), vec![c], Init::Zeros));
    push_linear(&mut s, "enc.conv_proj", flat, d);
    for i in 0..cfg.acoustic_layers {
        push_encoder_layer(&mut s, &format!("enc.acoustic.{i}"), cfg);
    }
    push_ln(&mut s, "enc.acoustic_ln", d);
    for i in 0..cfg.shared_layers {
        push_encoder_layer(&mut s, &format!("enc.shared.{i}"), cfg);
    }
    push_ln(&mut s, "enc.ln", d);
    push_linear(&mut s, "head.recon.proj", d, flat);
    s.push(("head.recon.deconv1.w".into(), vec![c, c, 3, 3], Init::Xavier { fan_in: c * 9, fan_out: c * 9 }));
    s.push(("head.recon.deconv1.b".into(), vec![c], Init::Zeros));
    s.push(("head.recon.deconv2.w".into(), vec![c, 1, 3, 3], Init::Xavier { fan_in: c * 9, fan_out: 9 }));
    s.push(("head.recon.deconv2.b".into(), vec![1], Init::Zeros));
    if cfg.tie_embeddings {
        s.push(("head.token.b".into(), vec![v], Init::Zeros));
    } else {
        push_linear(&mut s, "head.token", d, v);
    }
    push_linear(&mut s, "head.ctc", d, v + 1);
    for i in 0..cfg.dec_layers {
        let n = format!("dec.{i}");
        push_ln(&mut s, &format!("{n}.ln1"), d);
        push_attn(&mut s, &format!("{n}.self_attn"), d);
        push_ln(&mut s, &format!("{n}.ln_cross"), d);
        push_attn(&mut s, &format!("{n}.cross_attn"), d);
        push_ln(&mut s, &format!("{n}.ln2"), d);
        push_ffn(&mut s, &format!("{n}.ffn"), d, cfg.ffn_dim);
    }
    push_ln(&mut s, "dec.ln", d);
    push_linear(&mut s, "dec.out", d, v);
    s
}

pub(crate) fn init_tensor<F: Real>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = match init {
        Init::Zeros => vec![F::zero(); n],
        Init::Ones => vec![F::one(); n],
        Init::Xavier { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| F::c(rng.gen_range(-a..a))).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| F::c(dist.sample(rng))).collect()
        }
    };
    Tensor::new(shape, data).expect("parameter shape")
}

/// Parameters by name plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Rc<Tensor<F>>>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = parameter_specs(&config)
            .into_iter()
            .map(|(name, shape, init)| (name, Rc::new(init_tensor(&shape, init, &mut rng))))
            .collect();
        Ok(Model { config, params })
    }

    pub fn param(&self, name: &str) -> Result<&Rc<Tensor<F>>, ModelError> {
        self.params.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn set_param(&mut self, name: &str, t: Tensor<F>) -> Result<(), ModelError> {
        let slot = self.params.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            }));
        }
        *slot = Rc::new(t);
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), Rc::new(v.cast()))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_kv() {
        let mut c = ModelConfig::tiny(40, 12);
        c.hierarchical = true;
        c.mask_lambda = 0.25;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let mut kv = KvConfig::default();
        kv.set("model.nonsense", 1);
        assert!(ModelConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = ModelConfig { heads: 3, ..ModelConfig::tiny(40, 12) };
        assert!(c.validate().is_err());
        let c = ModelConfig { ffn_dim: 8, ..ModelConfig::tiny(40, 12) };
        assert!(c.validate().is_err());
    }

    #[test]
    fn downsampling_arithmetic() {
        let c = ModelConfig::default();
        assert_eq!(c.downsampled_len(100).unwrap(), 25);
        assert_eq!(c.downsampled_len(4).unwrap(), 1);
        assert!(c.downsampled_len(3).is_err());
        assert_eq!(c.conv_freq_out(), 20);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::new(ModelConfig::tiny(30, 8), 5).unwrap();
        let b = Model::<f32>::new(ModelConfig::tiny(30, 8), 5).unwrap();
        let c = Model::<f32>::new(ModelConfig::tiny(30, 8), 6).unwrap();
        assert!(a.params.iter().all(|(k, v)| b.params[k] == *v));
        assert_ne!(a.params["enc.shared.0.attn.q.w"], c.params["enc.shared.0.attn.q.w"]);
        assert!(a.params["enc.shared.0.attn.q.b"].data().iter().all(|&x| x == 0.0));
    }
}
