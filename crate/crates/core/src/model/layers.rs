//! Building blocks evaluated on a tape: linear, layer norm, dropout,
//! multi-head attention and pre-LN transformer layers.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelError};
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

/// Attention probabilities captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord<F: Real> {
    /// Parameter prefix of the attention block, e.g. `enc.shared.0.attn`.
    pub block: String,
    /// `[heads, queries, keys]`.
    pub probs: Tensor<F>,
}

/// A forward pass of one model on one tape. Parameters are bound to tape
/// leaves lazily, once each.
pub struct Ctx<'a, F: Real> {
    pub tape: &'a Tape<F>,
    pub model: &'a Model<F>,
    bound: RefCell<BTreeMap<String, Var>>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
    attention: Option<RefCell<Vec<AttentionRecord<F>>>>,
}

impl<'a, F: Real> Ctx<'a, F> {
    /// Inference context: no dropout.
    pub fn eval(tape: &'a Tape<F>, model: &'a Model<F>) -> Self {
        Ctx {
            tape,
            model,
            bound: RefCell::new(BTreeMap::new()),
            dropout_rng: None,
            attention: None,
        }
    }

    /// Training context: dropout drawn from `seed` when the model's rate is positive.
    pub fn train(tape: &'a Tape<F>, model: &'a Model<F>, seed: u64) -> Self {
        let mut c = Self::eval(tape, model);
        if model.config.dropout > 0.0 {
            c.dropout_rng = Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
        }
        c
    }

    pub fn record_attention(mut self) -> Self {
        self.attention = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn take_attention(&self) -> Vec<AttentionRecord<F>> {
        self.attention.as_ref().map(|a| a.take()).unwrap_or_default()
    }

    pub fn p(&self, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let t = Rc::clone(self.model.param(name)?);
        let v = self.tape.param(t);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Use `v` in place of the stored parameter `name` for this pass.
    pub fn bind(&self, name: &str, v: Var) -> Result<(), ModelError> {
        let expected = self.model.param(name)?.shape().to_vec();
        let found = self.tape.shape(v);
        if found != expected {
            return Err(ModelError::Format(format!("{name}: bound shape {found:?}, expected {expected:?}")));
        }
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(())
    }

    /// Parameters touched so far, with their tape handles.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        self.bound.borrow().iter().map(|(k, &v)| (k.clone(), v)).collect()
    }

    /// Gradients by parameter name; parameters with no gradient path are omitted.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.bound_params()
            .into_iter()
            .filter_map(|(k, v)| grads.take(v).map(|g| (k, g)))
            .collect()
    }

    pub fn linear(&self, x: Var, name: &str) -> Result<Var, ModelError> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    pub fn layer_norm(&self, x: Var, name: &str) -> Result<Var, ModelError> {
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.b"))?;
        Ok(self.tape.layer_norm(x, g, b, LN_EPS)?)
    }

    pub fn dropout(&self, x: Var) -> Result<Var, ModelError> {
        let Some(rng) = &self.dropout_rng else { return Ok(x) };
        let p = self.model.config.dropout;
        let shape = self.tape.shape(x);
        let n: usize = shape.iter().product();
        let keep = F::c(1.0 / (1.0 - p));
        let mut rng = rng.borrow_mut();
        let mask: Vec<F> = (0..n).map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep }).collect();
        let m = self.tape.constant(Tensor::new(&shape, mask)?);
        Ok(self.tape.mul(x, m)?)
    }

    fn split_heads(&self, x: Var, n: usize) -> Result<Var, ModelError> {
        let h = self.model.config.heads;
        let dh = self.model.config.d_model / h;
        let r = self.tape.reshape(x, &[n, h, dh])?;
        Ok(self.tape.permute(r, &[1, 0, 2])?)
    }

    /// Multi-head attention of `q_in: [n, d]` over `kv_in: [m, d]`.
    pub fn attention(&self, q_in: Var, kv_in: Var, name: &str, causal: bool) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let n = self.tape.shape(q_in)[0];
        let m = self.tape.shape(kv_in)[0];
        let dh = cfg.d_model / cfg.heads;
        let q = self.split_heads(self.linear(q_in, &format!("{name}.q"))?, n)?;
        let k = self.split_heads(self.linear(kv_in, &format!("{name}.k"))?, m)?;
        let v = self.split_heads(self.linear(kv_in, &format!("{name}.v"))?, m)?;
        let scores = self.tape.matmul_ext(q, k, true)?;
        let mut scores = self.tape.scale(scores, F::c(1.0 / (dh as f64).sqrt()));
        if causal {
            let mask: Vec<F> = (0..n * m)
                .map(|i| if i % m > i / m { F::c(MASKED_SCORE) } else { F::zero() })
                .collect();
            let mv = self.tape.constant(Tensor::new(&[n, m], mask)?);
            scores = self.tape.add(scores, mv)?;
        }
        let probs = self.tape.softmax(scores);
        if let Some(rec) = &self.attention {
            rec.borrow_mut().push(AttentionRecord {
                block: name.to_string(),
                probs: (*self.tape.value(probs)).clone(),
            });
        }
        let ctx = self.tape.matmul(probs, v)?;
        let ctx = self.tape.permute(ctx, &[1, 0, 2])?;
        let ctx = self.tape.reshape(ctx, &[n, cfg.d_model])?;
        self.linear(ctx, &format!("{name}.o"))
    }

    pub fn feed_forward(&self, x: Var, name: &str) -> Result<Var, ModelError> {
        let h = self.linear(x, &format!("{name}.fc1"))?;
        let h = self.dropout(self.tape.relu(h))?;
        self.linear(h, &format!("{name}.fc2"))
    }

    fn residual(&self, x: Var, y: Var) -> Result<Var, ModelError> {
        let y = self.dropout(y)?;
        Ok(self.tape.add(x, y)?)
    }

    /// Pre-LN self-attention + feed-forward block.
    pub fn encoder_layer(&self, x: Var, name: &str) -> Result<Var, ModelError> {
        let h = self.layer_norm(x, &format!("{name}.ln1"))?;
        let a = self.attention(h, h, &format!("{name}.attn"), false)?;
        let x = self.residual(x, a)?;
        let h = self.layer_norm(x, &format!("{name}.ln2"))?;
        let f = self.feed_forward(h, &format!("{name}.ffn"))?;
        self.residual(x, f)
    }

    /// Pre-LN causal self-attention, cross-attention over `memory`, feed-forward.
    pub fn decoder_layer(&self, x: Var, memory: Var, name: &str) -> Result<Var, ModelError> {
        let h = self.layer_norm(x, &format!("{name}.ln1"))?;
        let a = self.attention(h, h, &format!("{name}.self_attn"), true)?;
        let x = self.residual(x, a)?;
        let h = self.layer_norm(x, &format!("{name}.ln_cross"))?;
        let c = self.attention(h, memory, &format!("{name}.cross_attn"), false)?;
        let x = self.residual(x, c)?;
        let h = self.layer_norm(x, &format!("{name}.ln2"))?;
        let f = self.feed_forward(h, &format!("{name}.ffn"))?;
        self.residual(x, f)
    }
}
