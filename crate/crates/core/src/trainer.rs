//! Optimization loop for FAT-MLM pretraining and FAT-ST fine-tuning:
//! Adam with an inverse-sqrt schedule, global-norm clipping, periodic
//! checkpoints, exact resume and last-k averaging.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{parse_value, ConfigError, KvConfig};
use crate::corpus::{finetune_streams, pretrain_streams, Batch, BucketConfig, CorpusError, Dataset, ExampleView, Mixing, Objective, Scheduler, Stream};
use crate::model::{average_checkpoints, Checkpoint, Ctx, Model, ModelConfig, ModelError, Segment};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::objectives::{loss_fat_st, teacher_forcing, LossBreakdown, LossLog, LossWeights, Source};
use crate::seed::mix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("non-finite {what} at step {step}; last finite parameters in {}", .saved.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "(not saved)".into()))]
    Diverged { step: u64, what: &'static str, saved: Option<PathBuf> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Pretrain => "fat-mlm",
            Phase::Finetune => "fat-st",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    /// Multiplier on `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub seed: u64,
    pub ckpt_interval: u64,
    pub average_last: usize,
    pub dev_interval: u64,
    pub weights: LossWeights,
    pub label_smoothing: f64,
    pub mixing: Mixing,
    pub bucket: BucketConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 1.0,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: 5.0,
            seed: 1,
            ckpt_interval: 100,
            average_last: 5,
            dev_interval: 50,
            weights: LossWeights::default(),
            label_smoothing: 0.0,
            mixing: Mixing::RoundRobin,
            bucket: BucketConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.warmup < 1 {
            return bad("train.warmup must be ≥ 1");
        }
        if !(self.clip > 0.0) {
            return bad("train.clip must be > 0");
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return bad("train.lr and train.eps must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must be in [0, 1)");
        }
        if self.ckpt_interval == 0 || self.average_last == 0 || self.dev_interval == 0 {
            return bad("train.ckpt_interval, train.average_last and train.dev_interval must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("train.label_smoothing must be in [0, 1)");
        }
        Ok(())
    }

    /// Override fields from `train.*` keys; other sections are ignored.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<(), ConfigError> {
        for (k, v) in kv.section("train") {
            match k {
                "train.steps" => self.steps = parse_value(k, v)?,
                "train.lr" => self.lr = parse_value(k, v)?,
                "train.warmup" => self.warmup = parse_value(k, v)?,
                "train.beta1" => self.beta1 = parse_value(k, v)?,
                "train.beta2" => self.beta2 = parse_value(k, v)?,
                "train.eps" => self.eps = parse_value(k, v)?,
                "train.clip" => self.clip = parse_value(k, v)?,
                "train.seed" => self.seed = parse_value(k, v)?,
                "train.ckpt_interval" => self.ckpt_interval = parse_value(k, v)?,
                "train.average_last" => self.average_last = parse_value(k, v)?,
                "train.dev_interval" => self.dev_interval = parse_value(k, v)?,
                "train.weight_st" => self.weights.st = parse_value(k, v)?,
                "train.weight_mt" => self.weights.mt = parse_value(k, v)?,
                "train.weight_mlm" => self.weights.mlm = parse_value(k, v)?,
                "train.weight_ctc" => self.weights.ctc = parse_value(k, v)?,
                "train.label_smoothing" => self.label_smoothing = parse_value(k, v)?,
                "train.max_frames" => self.bucket.max_frames = parse_value(k, v)?,
                "train.batch_frames" => self.bucket.batch_frames = parse_value(k, v)?,
                "train.batch_tokens" => self.bucket.batch_tokens = parse_value(k, v)?,
                "train.mixing" => {
                    self.mixing = match v {
                        "round-robin" => Mixing::RoundRobin,
                        "proportional" => Mixing::Proportional,
                        _ => {
                            return Err(ConfigError::BadValue {
                                key: k.into(),
                                value: v.into(),
                                msg: "expected round-robin or proportional".into(),
                            })
                        }
                    }
                }
                _ => return Err(ConfigError::UnknownKey(k.to_string())),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let mut c = TrainConfig::default();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    /// Learning rate for 1-based `step`.
    pub fn learning_rate(&self, step: u64, d_model: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.lr * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `clip`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut BTreeMap<String, Tensor<F>>, clip: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let s = F::c(clip / (norm + 1e-6));
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with per-parameter step counts. Parameters absent from a step's
/// gradient map (no path to the loss) are left untouched, moments included.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            ..Default::default()
        }
    }

    pub fn update(&mut self, model: &mut Model<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<(), ModelError> {
        for (name, g) in grads {
            let p = model.param(name)?;
            let mut next = (**p).clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), next.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi as f64;
                let mi = self.beta1 * md[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * vd[i] as f64 + (1.0 - self.beta2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                pd[i] = (pd[i] as f64 - step) as f32;
            }
            model.set_param(name, next)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub breakdown: LossBreakdown,
}

/// Which of the training streams one step drew, grouped by objective.
#[derive(Debug, Clone, Default)]
pub struct StepBatches {
    pub st: Option<Batch>,
    pub mt: Option<Batch>,
    pub mlm: Vec<Batch>,
}

fn merge_into(slot: &mut Option<Batch>, b: &Batch) {
    match slot {
        Some(acc) => acc.examples.extend(b.examples.iter().cloned()),
        None => *slot = Some(b.clone()),
    }
}

/// Evaluate the weighted objective on one step's batches.
pub fn step_loss<F: Real>(ctx: &Ctx<F>, b: &StepBatches, cfg: &TrainConfig, seed: u64) -> Result<(Var, LossBreakdown), ModelError> {
    let mlm: Vec<&Batch> = b.mlm.iter().collect();
    loss_fat_st(ctx, b.st.as_ref(), b.mt.as_ref(), &mlm, cfg.weights, cfg.label_smoothing, seed)
}

pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub phase: Phase,
    pub adam: Adam,
    scheduler: Scheduler,
    step: u64,
    vocab_hash: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig, phase: Phase, streams: Vec<Stream>, vocab_hash: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let scheduler = Scheduler::new(streams, cfg.mixing, cfg.seed)?;
        Ok(Trainer {
            adam: Adam::new(cfg.beta1, cfg.beta2, cfg.eps),
            model,
            cfg,
            phase,
            scheduler,
            step: 0,
            vocab_hash,
        })
    }

    /// FAT-MLM over one stream per flavor in `pool`.
    pub fn pretrain(model: Model<f32>, cfg: TrainConfig, pool: &Dataset, vocab_hash: u64) -> Result<Self, TrainError> {
        let streams = phase_streams(Phase::Pretrain, pool, &cfg)?;
        Self::new(model, cfg, Phase::Pretrain, streams, vocab_hash)
    }

    /// FAT-ST over ST, MT and FAT-MLM streams decoupled from `pool`.
    pub fn finetune(model: Model<f32>, cfg: TrainConfig, pool: &Dataset, vocab_hash: u64) -> Result<Self, TrainError> {
        let streams = phase_streams(Phase::Finetune, pool, &cfg)?;
        Self::new(model, cfg, Phase::Finetune, streams, vocab_hash)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn streams(&self) -> &[Stream] {
        self.scheduler.streams()
    }

    /// Draw one round of batches (one per stream under round-robin).
    fn draw(&mut self) -> StepBatches {
        let mut out = StepBatches::default();
        for _ in 0..self.scheduler.streams().len() {
            let (si, batch) = self.scheduler.next_batch();
            let batch = batch.clone();
            match self.scheduler.streams()[si].objective {
                Objective::St => merge_into(&mut out.st, &batch),
                Objective::Mt => merge_into(&mut out.mt, &batch),
                Objective::FatMlm => out.mlm.push(batch),
            }
        }
        out
    }

    /// One optimizer update. On a non-finite loss or gradient the model is
    /// left as it was before the step.
    pub fn train_step(&mut self) -> Result<StepReport, TrainError> {
        let step = self.step + 1;
        let batches = self.draw();
        let tape = Tape::<f32>::new();
        let ctx = Ctx::train(&tape, &self.model, mix(&[self.cfg.seed, step, 0xd7]));
        let (total, breakdown) = step_loss(&ctx, &batches, &self.cfg, mix(&[self.cfg.seed, step]))?;
        if !breakdown.total.is_finite() || !tape.scalar_value(total).is_finite() {
            return Err(TrainError::Diverged { step, what: "loss", saved: None });
        }
        let mut g = tape.backward(total).map_err(ModelError::from)?;
        let mut grads = ctx.param_grads(&mut g);
        if !grads.values().all(Tensor::all_finite) {
            return Err(TrainError::Diverged { step, what: "gradient", saved: None });
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip);
        let lr = self.cfg.learning_rate(step, self.model.config.d_model);
        drop(ctx);
        self.adam.update(&mut self.model, &grads, lr)?;
        self.step = step;
        Ok(StepReport { step, lr, grad_norm, breakdown })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, self.vocab_hash)
    }

    /// Parameters, optimizer moments and scheduler position in one file.
    pub fn state(&self) -> Checkpoint {
        let mut ck = self.checkpoint();
        ck.config.set("meta.draws", self.scheduler.draws());
        ck.config.set("meta.phase", self.phase.label());
        for (name, t) in &self.adam.t {
            ck.config.set(&format!("meta.adam_t.{name}"), t);
        }
        let adam = self.adam.m.iter().map(|(k, v)| (format!("adam.m.{k}"), v)).chain(self.adam.v.iter().map(|(k, v)| (format!("adam.v.{k}"), v)));
        ck.tensors.extend(adam.map(|(k, v)| (k, v.clone())));
        ck
    }

    /// Restore a state written by [`Trainer::state`]. `streams` must be
    /// rebuilt from the same data and seed as the original run.
    pub fn resume(state: &Checkpoint, cfg: TrainConfig, phase: Phase, streams: Vec<Stream>) -> Result<Self, TrainError> {
        let mut params = state.clone();
        params.tensors.retain(|k, _| !k.starts_with("adam."));
        params.config.entries.retain(|k, _| !k.starts_with("meta.adam_t.") && k != "meta.draws" && k != "meta.phase");
        let model = params.to_model::<f32>()?;
        let mut t = Trainer::new(model, cfg, phase, streams, state.vocab_hash().unwrap_or(0))?;
        for (k, v) in &state.tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                t.adam.m.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                t.adam.v.insert(name.to_string(), v.clone());
            }
        }
        for (k, v) in state.config.section("meta") {
            if let Some(name) = k.strip_prefix("meta.adam_t.") {
                t.adam.t.insert(name.to_string(), parse_value(k, v)?);
            }
        }
        let draws: u64 = parse_value("meta.draws", state.config.get("meta.draws").unwrap_or("0"))?;
        t.scheduler.fast_forward(draws);
        t.step = state.step();
        Ok(t)
    }

    /// Train until `cfg.steps`, writing into `dir`:
    /// `train.csv`, `dev.csv`, `ckpt_<step>.fatc`, `state.fatc` and `final.fatc`.
    /// On divergence the pre-step parameters go to `last_finite.fatc`.
    pub fn run(&mut self, dir: &Path, dev: Option<&[Stream]>, mut on_step: impl FnMut(&StepReport)) -> Result<RunSummary, TrainError> {
        fs::create_dir_all(dir)?;
        let log_path = dir.join("train.csv");
        let fresh = self.step == 0 || !log_path.exists();
        let file = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&log_path)?;
        let mut log = if fresh { LossLog::new(file)? } else { LossLog::continuing(file) };
        let mut dev_log = open_dev_log(&dir.join("dev.csv"), fresh)?;
        let mut dev_history = Vec::new();
        let mut last = None;
        while self.step < self.cfg.steps {
            let report = match self.train_step() {
                Ok(r) => r,
                Err(TrainError::Diverged { step, what, .. }) => {
                    let path = dir.join("last_finite.fatc");
                    self.checkpoint().save(&path)?;
                    return Err(TrainError::Diverged { step, what, saved: Some(path) });
                }
                Err(e) => return Err(e),
            };
            log.append(report.step, self.phase.label(), &report.breakdown)?;
            on_step(&report);
            let s = report.step;
            if s % self.cfg.ckpt_interval == 0 || s == self.cfg.steps {
                self.checkpoint().save(dir.join(format!("ckpt_{s:06}.fatc")))?;
                self.state().save(dir.join("state.fatc"))?;
            }
            if let Some(streams) = dev {
                if s % self.cfg.dev_interval == 0 || s == self.cfg.steps {
                    let d = dev_loss(&self.model, streams, &self.cfg)?;
                    writeln!(dev_log, "{s},{},{}", d.total, d.st)?;
                    dev_history.push((s, d));
                }
            }
            last = Some(report);
        }
        let final_ck = average_last(dir, self.cfg.average_last)?;
        let final_path = dir.join("final.fatc");
        final_ck.save(&final_path)?;
        Ok(RunSummary { last, dev: dev_history, final_path })
    }
}

/// The streams a phase trains on. Fine-tuning requires an ST stream.
pub fn phase_streams(phase: Phase, pool: &Dataset, cfg: &TrainConfig) -> Result<Vec<Stream>, TrainError> {
    let (streams, report) = match phase {
        Phase::Pretrain => pretrain_streams(pool, &cfg.bucket, cfg.seed),
        Phase::Finetune => finetune_streams(pool, &cfg.bucket, cfg.seed),
    };
    if report.dropped > 0 {
        log::warn!("dropped {} utterances over the frame limit ({} kept)", report.dropped, report.kept);
    }
    if phase == Phase::Finetune && !streams.iter().any(|s| s.objective == Objective::St) {
        return Err(CorpusError::NothingToSchedule.into());
    }
    Ok(streams)
}

fn open_dev_log(path: &Path, fresh: bool) -> io::Result<File> {
    if fresh || !path.exists() {
        let mut f = File::create(path)?;
        writeln!(f, "step,total,st")?;
        Ok(f)
    } else {
        OpenOptions::new().append(true).open(path)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub last: Option<StepReport>,
    pub dev: Vec<(u64, LossBreakdown)>,
    pub final_path: PathBuf,
}

/// Checkpoint files `ckpt_<step>.fatc` in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut found: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("ckpt_")?.strip_suffix(".fatc")?.parse().ok()?;
            Some((step, e.path()))
        })
        .collect();
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Average of the newest `k` checkpoints in `dir`.
pub fn average_last(dir: &Path, k: usize) -> Result<Checkpoint, TrainError> {
    let paths = list_checkpoints(dir)?;
    let newest = &paths[paths.len().saturating_sub(k)..];
    let cks = newest.iter().map(Checkpoint::load).collect::<Result<Vec<_>, _>>()?;
    Ok(average_checkpoints(&cks)?)
}

/// Mean loss breakdown over the held-out streams. Each batch is scored
/// under its own objective with masks fixed by the run seed; each term is
/// averaged over the batches that produce it and the total is recombined
/// from those means.
pub fn dev_loss<F: Real>(model: &Model<F>, streams: &[Stream], cfg: &TrainConfig) -> Result<LossBreakdown, ModelError> {
    let mut acc = LossBreakdown {
        weights: cfg.weights,
        ..Default::default()
    };
    let mut counts = [0usize; 3];
    for (si, stream) in streams.iter().enumerate() {
        for (bi, batch) in stream.batches.iter().enumerate() {
            let mut b = StepBatches::default();
            match stream.objective {
                Objective::St => b.st = Some(batch.clone()),
                Objective::Mt => b.mt = Some(batch.clone()),
                Objective::FatMlm => b.mlm.push(batch.clone()),
            }
            let tape = Tape::<F>::new();
            let ctx = Ctx::eval(&tape, model);
            let (_, br) = step_loss(&ctx, &b, cfg, mix(&[cfg.seed, 0xde5, si as u64, bi as u64]))?;
            acc.speech += br.speech;
            acc.src += br.src;
            acc.tgt += br.tgt;
            acc.st += br.st;
            acc.mt += br.mt;
            acc.ctc += br.ctc;
            acc.ctc_infeasible += br.ctc_infeasible;
            counts[stream.objective as usize] += 1;
        }
    }
    let per = |n: usize| 1.0 / n.max(1) as f64;
    acc.st *= per(counts[0]);
    acc.ctc *= per(counts[0]);
    acc.mt *= per(counts[1]);
    for slot in [&mut acc.speech, &mut acc.src, &mut acc.tgt] {
        *slot *= per(counts[2]);
    }
    acc.total = acc.weighted_sum();
    Ok(acc)
}

/// Fraction of target tokens (eos included) whose teacher-forced argmax is correct.
pub fn teacher_forced_accuracy<F: Real>(model: &Model<F>, views: &[ExampleView], source: Source) -> Result<f64, ModelError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for view in views {
        let Some(y) = view.translation() else { continue };
        let tape = Tape::<F>::new();
        let ctx = Ctx::eval(&tape, model);
        let memory = match source {
            Source::Speech => {
                let s = view.speech().ok_or(ModelError::MissingSegment(Segment::Speech))?;
                ctx.encode_speech_source(ctx.spectrogram(s))?.0.hidden
            }
            Source::Text => {
                let x = view.transcription().ok_or(ModelError::MissingSegment(Segment::Src))?;
                ctx.encode_text_source(&x.ids)?.hidden
            }
        };
        let (input, target) = teacher_forcing(&y.ids);
        let logits = tape.value(ctx.decode(memory, &input)?);
        for (i, &want) in target.iter().enumerate() {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hit += usize::from(best == want);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Pretraining turns language embeddings on iff some example carries target text.
pub fn pretrain_model_config(mut config: ModelConfig, pool: &Dataset) -> ModelConfig {
    config.lang_embed = pool.examples.iter().any(|e| e.translation.is_some());
    config
}

/// FAT-ST always uses language embeddings.
pub fn finetune_model_config(mut config: ModelConfig) -> ModelConfig {
    config.lang_embed = true;
    config
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            warmup: 100,
            lr: 2.0,
            ..Default::default()
        };
        let peak = cfg.learning_rate(100, 64);
        assert!((peak - 2.0 / 8.0 / 10.0).abs() < 1e-15);
        assert!(cfg.learning_rate(50, 64) < peak);
        assert!((cfg.learning_rate(50, 64) - peak / 2.0).abs() < 1e-15);
        assert!((cfg.learning_rate(400, 64) - peak / 2.0).abs() < 1e-15);
    }

    #[test]
    fn config_keys_round_trip_and_validate() {
        let kv = KvConfig::parse("train.steps=7\ntrain.warmup=3\ntrain.mixing=proportional\ntrain.weight_ctc=0\n").unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!((c.steps, c.warmup, c.mixing, c.weights.ctc), (7, 3, Mixing::Proportional, 0.0));
        assert!(TrainConfig::from_kv(&KvConfig::parse("train.warmup=0\n").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvConfig::parse("train.clip=0\n").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvConfig::parse("train.bogus=1\n").unwrap()).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::<f32>::full(&[10], 3.0));
        g.insert("b".to_string(), Tensor::<f32>::full(&[4, 4], -2.0));
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - (90.0f64 + 64.0).sqrt()).abs() < 1e-6);
        let after = clip_global_norm(&mut g, 5.0);
        assert!(after <= 5.0 + 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut model = Model::<f32>::new(ModelConfig::tiny(12, 8), 0).unwrap();
        let before = model.params.clone();
        let grads: BTreeMap<String, Tensor<f32>> = model.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        let mut adam = Adam::new(0.9, 0.98, 1e-9);
        adam.update(&mut model, &grads, 1e-3).unwrap();
        for (k, v) in &before {
            assert_eq!(**v, **model.param(k).unwrap(), "{k}");
        }
    }
}
