use super::{Ctx, ModelError};
use crate::numerics::{sinusoidal_positions, Real, Var};

impl<F: Real> Ctx<'_, F> {
    /// Teacher-forced decoder logits `[|prefix|, V]` for `prefix` (starting
    /// with bos) attending over `memory: [N, d_model]`.
    pub fn decode(&self, memory: Var, prefix: &[usize]) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let x = self.tape.gather(self.p("embed.tokens")?, prefix)?;
        let x = self.tape.scale(x, F::c((cfg.d_model as f64).sqrt()));
        let pos: Vec<usize> = (0..prefix.len()).collect();
        let pe = self.tape.constant(sinusoidal_positions(&pos, cfg.d_model));
        let mut x = self.dropout(self.tape.add(x, pe)?)?;
        for i in 0..cfg.dec_layers {
            x = self.decoder_layer(x, memory, &format!("dec.{i}"))?;
        }
        let x = self.layer_norm(x, "dec.ln")?;
        self.linear(x, "dec.out")
    }

    /// Log-distribution over the token following `prefix`.
    pub fn decode_step(&self, memory: Var, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let logits = self.decode(memory, prefix)?;
        let n = prefix.len();
        let last = self.tape.slice(logits, 0, n - 1, n)?;
        let lp = self.tape.log_softmax(last);
        Ok(self.tape.value(lp).data().iter().map(|v| v.f64()).collect())
    }
}
