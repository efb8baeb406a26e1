//! FATC checkpoint files, averaging and FAT-ST initialization from a
//! pretrained encoder.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use super::{parameter_specs, Model, ModelConfig, ModelError};
use crate::config::{parse_value, KvConfig};
use crate::numerics::{Real, Tensor};

pub const FATC_MAGIC: &[u8; 4] = b"FATC";
pub const FATC_VERSION: u32 = 1;

/// Named f32 tensors plus a canonical key=value block holding the model
/// configuration and `meta.*` entries (step, vocab hash).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: KvConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Format(format!("truncated at byte {} (need {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ModelError::Format(e.to_string()))
    }
}

impl Checkpoint {
    pub fn from_model<F: Real>(model: &Model<F>, step: u64, vocab_hash: u64) -> Self {
        let mut config = model.config.to_kv();
        config.set("meta.step", step);
        config.set("meta.vocab_hash", format!("{vocab_hash:016x}"));
        Checkpoint {
            config,
            tensors: model.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, ModelError> {
        let mut kv = KvConfig::default();
        for (k, v) in self.config.entries.iter().filter(|(k, _)| !k.starts_with("meta.")) {
            kv.set(k, v);
        }
        Ok(ModelConfig::from_kv(&kv)?)
    }

    pub fn step(&self) -> u64 {
        self.config.get("meta.step").and_then(|s| parse_value("meta.step", s).ok()).unwrap_or(0)
    }

    pub fn vocab_hash(&self) -> Option<u64> {
        self.config.get("meta.vocab_hash").and_then(|s| u64::from_str_radix(s, 16).ok())
    }

    /// Rebuild a model; every architecture parameter must be present with
    /// the right shape and no extras are allowed.
    pub fn to_model<F: Real>(&self) -> Result<Model<F>, ModelError> {
        let config = self.model_config()?;
        let specs = parameter_specs(&config);
        if specs.len() != self.tensors.len() {
            let expected: Vec<&str> = specs.iter().map(|s| s.0.as_str()).collect();
            let extra: Vec<String> = self.tensors.keys().filter(|k| !expected.contains(&k.as_str())).cloned().collect();
            return Err(ModelError::Format(format!(
                "expected {} tensors, found {} (unexpected: {extra:?})",
                specs.len(),
                self.tensors.len()
            )));
        }
        let mut params = BTreeMap::new();
        for (name, shape, _) in specs {
            let t = self.tensors.get(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            params.insert(name, Rc::new(t.cast()));
        }
        Ok(Model { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FATC_MAGIC);
        out.extend_from_slice(&FATC_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FATC_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FATC_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let config = KvConfig::parse(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Elementwise mean of parameters. Configs (ignoring `meta.*`) and tensor
/// names/shapes must agree; metadata is taken from the last checkpoint.
pub fn average_checkpoints(cks: &[Checkpoint]) -> Result<Checkpoint, ModelError> {
    let last = cks.last().ok_or_else(|| ModelError::Format("no checkpoints to average".into()))?;
    let arch = |c: &Checkpoint| -> Vec<(String, String)> {
        c.config.entries.iter().filter(|(k, _)| !k.starts_with("meta.")).map(|(k, v)| (k.clone(), v.clone())).collect()
    };
    let reference = arch(last);
    for c in cks {
        if arch(c) != reference {
            return Err(ModelError::ConfigMismatch(
                arch(c).into_iter().filter(|e| !reference.contains(e)).map(|(k, _)| k).collect(),
            ));
        }
        if c.tensors.len() != last.tensors.len()
            || c.tensors.iter().any(|(k, t)| last.tensors.get(k).map(|u| u.shape()) != Some(t.shape()))
        {
            return Err(ModelError::Format("parameter names or shapes differ".into()));
        }
    }
    let n = cks.len() as f64;
    let tensors = last
        .tensors
        .iter()
        .map(|(name, t)| {
            let mut acc = vec![0f64; t.len()];
            for c in cks {
                for (a, &v) in acc.iter_mut().zip(c.tensors[name].data()) {
                    *a += v as f64;
                }
            }
            let data = acc.into_iter().map(|a| (a / n) as f32).collect();
            (name.clone(), Tensor::new(t.shape(), data).expect("same shape"))
        })
        .collect();
    Ok(Checkpoint {
        config: last.config.clone(),
        tensors,
    })
}

fn is_fresh(name: &str) -> bool {
    name.starts_with("dec.") || name.starts_with("head.ctc.")
}

/// FAT-ST model whose encoder side is copied from a pretrained checkpoint
/// and whose decoder layer `i` takes its self-attention, feed-forward and
/// layer norms from shared encoder layer `i`. Cross-attention, the decoder
/// output projection and the CTC head are freshly initialized from `seed`.
pub fn init_fatst_from_fatmlm(ck: &Checkpoint, config: &ModelConfig, seed: u64) -> Result<Model<f32>, ModelError> {
    let pre = ck.model_config()?;
    let mismatches = pre.architecture_mismatches(config);
    if !mismatches.is_empty() {
        return Err(ModelError::ConfigMismatch(mismatches));
    }
    let source = ck.to_model::<f32>()?;
    let mut model = Model::<f32>::new(config.clone(), seed)?;
    for (name, t) in &source.params {
        if !is_fresh(name) {
            model.set_param(name, (**t).clone())?;
        }
    }
    for i in 0..config.dec_layers.min(config.shared_layers) {
        for (dec, enc) in [("self_attn", "attn"), ("ln1", "ln1"), ("ffn", "ffn"), ("ln2", "ln2")] {
            let from = format!("enc.shared.{i}.{enc}.");
            let to = format!("dec.{i}.{dec}.");
            for (name, t) in source.params.iter().filter(|(k, _)| k.starts_with(&from)) {
                model.set_param(&name.replacen(&from, &to, 1), (**t).clone())?;
            }
        }
    }
    Ok(model)
}
