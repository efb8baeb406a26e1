//! Waveform framing, log-mel filterbanks, feature normalization and the FATF
//! feature file format.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::numerics::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;
pub const FATF_MAGIC: &[u8; 4] = b"FATF";
pub const FATF_VERSION: u32 = 1;
const FATF_HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav format: {0}")]
    WavFormat(String),
    #[error("waveform of {len} samples is shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("invalid framing parameters: {0}")]
    Framing(String),
    #[error("not a FATF file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported FATF version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated FATF file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature dimension {found} does not match configured {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("spectrogram must have at least one frame and one feature")]
    Empty,
    #[error("malformed normalization stats: {0}")]
    Stats(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate == 0 {
            return Err(FeatureError::Framing("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(FeatureError::TooShort { len: 0, window: 1 });
        }
        Ok(Waveform { samples, sample_rate })
    }
}

/// Frame-level acoustic features, `frames × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    features: Tensor<f32>,
    pub frame_shift_ms: f32,
}

impl Spectrogram {
    pub fn new(features: Tensor<f32>, frame_shift_ms: f32) -> Result<Self, FeatureError> {
        if features.ndim() != 2 || features.is_empty() {
            return Err(FeatureError::Empty);
        }
        Ok(Spectrogram { features, frame_shift_ms })
    }

    pub fn from_rows(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self, FeatureError> {
        let t = Tensor::new(&[frames, dim], data).map_err(|_| FeatureError::Empty)?;
        Self::new(t, 10.0)
    }

    pub fn num_frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.features.row(t)
    }
}

/// Windowed frames, one row per frame.
#[derive(Debug, Clone)]
pub struct Frames {
    pub data: Vec<f64>,
    pub num_frames: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Frames {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.frame_len..(i + 1) * self.frame_len]
    }
}

pub fn frame_count(len: usize, window: usize, hop: usize) -> Option<usize> {
    (len >= window && window > 0 && hop > 0).then(|| 1 + (len - window) / hop)
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Cut `w` into Hann-windowed frames of `window_ms` every `hop_ms`.
pub fn frame_signal(w: &Waveform, window_ms: f64, hop_ms: f64) -> Result<Frames, FeatureError> {
    let sr = w.sample_rate as f64;
    let window = (sr * window_ms / 1000.0).round() as usize;
    let hop = (sr * hop_ms / 1000.0).round() as usize;
    if window == 0 || hop == 0 {
        return Err(FeatureError::Framing(format!("window {window_ms} ms / hop {hop_ms} ms round to zero samples")));
    }
    let num_frames = frame_count(w.samples.len(), window, hop).ok_or(FeatureError::TooShort {
        len: w.samples.len(),
        window,
    })?;
    let win = hann(window);
    let mut data = Vec::with_capacity(num_frames * window);
    for f in 0..num_frames {
        let start = f * hop;
        data.extend(
            w.samples[start..start + window]
                .iter()
                .zip(&win)
                .map(|(&s, &h)| s as f64 * h),
        );
    }
    Ok(Frames {
        data,
        num_frames,
        frame_len: window,
        hop,
        sample_rate: w.sample_rate,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequency (Hz) of mel band `k` for `n_mels` bands spanning
/// 0..Nyquist.
pub fn mel_center_hz(k: usize, n_mels: usize, sample_rate: u32) -> f64 {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    mel_to_hz(top * (k + 1) as f64 / (n_mels + 1) as f64)
}

/// Triangular filters, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|k| {
            let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Power spectrum → mel filterbank → natural log (floored at 1e-10).
pub fn log_mel(frames: &Frames, n_mels: usize) -> Result<Spectrogram, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::Framing("n_mels must be ≥ 1".into()));
    }
    let n_fft = frames.frame_len.next_power_of_two();
    let bank = mel_filterbank(n_mels, n_fft, frames.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames.num_frames * n_mels);
    for i in 0..frames.num_frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &s) in buf.iter_mut().zip(frames.frame(i)) {
            c.re = s;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    let shift_ms = frames.hop as f32 * 1000.0 / frames.sample_rate as f32;
    let t = Tensor::new(&[frames.num_frames, n_mels], out).map_err(|_| FeatureError::Empty)?;
    Spectrogram::new(t, shift_ms)
}

/// 25 ms / 10 ms framing followed by `n_mels` log-mel bands.
pub fn waveform_to_log_mel(w: &Waveform, n_mels: usize) -> Result<Spectrogram, FeatureError> {
    log_mel(&frame_signal(w, 25.0, 10.0)?, n_mels)
}

/// Read a mono 16-bit PCM WAV file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, FeatureError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(FeatureError::WavFormat(format!(
            "{} channel(s), {}-bit {:?}; expected mono 16-bit PCM",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn encode_features(s: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(FATF_HEADER_LEN + 4 * s.features.len());
    out.extend_from_slice(FATF_MAGIC);
    out.extend_from_slice(&FATF_VERSION.to_le_bytes());
    out.extend_from_slice(&(s.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(s.dim() as u32).to_le_bytes());
    for v in s.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse FATF bytes; `expected_dim` rejects files whose feature dimension
/// differs from the corpus configuration.
pub fn decode_features(bytes: &[u8], expected_dim: Option<usize>) -> Result<Spectrogram, FeatureError> {
    if bytes.len() < FATF_HEADER_LEN {
        return Err(FeatureError::Truncated {
            expected: FATF_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != FATF_MAGIC {
        return Err(FeatureError::BadMagic(magic));
    }
    let version = word(4);
    if version != FATF_VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let (frames, dim) = (word(8) as usize, word(12) as usize);
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(FeatureError::DimMismatch { expected, found: dim });
        }
    }
    let expected = FATF_HEADER_LEN + 4 * frames * dim;
    if bytes.len() != expected {
        return Err(FeatureError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[FATF_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Spectrogram::from_rows(frames, dim, data)
}

pub fn save_features(path: impl AsRef<Path>, s: &Spectrogram) -> Result<(), FeatureError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_features(s))?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Spectrogram, FeatureError> {
    decode_features(&fs::read(path)?, expected_dim)
}

/// Per-dimension mean / standard deviation over a training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn compute<'a>(specs: impl IntoIterator<Item = &'a Spectrogram>) -> Option<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for s in specs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
                sq = vec![0.0; s.dim()];
            }
            if s.dim() != sum.len() {
                continue;
            }
            for t in 0..s.num_frames() {
                for (j, &v) in s.frame(t).iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
            }
            n += s.num_frames();
        }
        if n == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-5)) as f32)
            .collect();
        Some(FeatureStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, s: &Spectrogram) -> Result<Spectrogram, FeatureError> {
        if s.dim() != self.mean.len() {
            return Err(FeatureError::DimMismatch {
                expected: self.mean.len(),
                found: s.dim(),
            });
        }
        let d = s.dim();
        let data = s
            .features
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        let mut out = Spectrogram::from_rows(s.num_frames(), d, data)?;
        out.frame_shift_ms = s.frame_shift_ms;
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f32]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        format!("fatspeech-cmvn 1\nmean {}\nstd {}\n", join(&self.mean), join(&self.std))
    }

    pub fn from_text(text: &str) -> Result<Self, FeatureError> {
        let mut lines = text.lines();
        if lines.next() != Some("fatspeech-cmvn 1") {
            return Err(FeatureError::Stats("missing header".into()));
        }
        let mut parse = |key: &str| -> Result<Vec<f32>, FeatureError> {
            let line = lines.next().ok_or_else(|| FeatureError::Stats(format!("missing {key}")))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| FeatureError::Stats(format!("expected {key}")))?;
            rest.split_whitespace()
                .map(|v| v.parse::<f32>().map_err(|e| FeatureError::Stats(e.to_string())))
                .collect()
        };
        let mean = parse("mean")?;
        let std = parse("std")?;
        if mean.len() != std.len() || mean.is_empty() {
            return Err(FeatureError::Stats("mean/std length mismatch".into()));
        }
        Ok(FeatureStats { mean, std })
    }
}
