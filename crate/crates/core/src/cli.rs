//! The `fatspeech` command line.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attention::{encoder_attention, write_dumps};
use crate::config::{ConfigError, KvConfig};
use crate::corpus::{load_manifest, Dataset, FeatureOptions, Manifest, MultimodalExample};
use crate::features::{load_wav, save_features, waveform_to_log_mel, FeatureStats};
use crate::inference::{corpus_bleu, translate, SourceInput};
use crate::model::{average_checkpoints, init_fatst_from_fatmlm, Checkpoint, Model, ModelConfig};
use crate::subword::{train_bpe, Vocabulary};
use crate::synth::{self, SynthConfig};
use crate::trainer::{finetune_model_config, phase_streams, pretrain_model_config, Phase, TrainConfig, TrainError, Trainer};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fatspeech", version, about = "Fused acoustic/text masked-LM pretraining and speech translation")]
pub struct Cli {
    /// Run seed; falls back to FATSPEECH_SEED, then to `train.seed` in the config.
    #[arg(long, global = true, env = "FATSPEECH_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a joint subword vocabulary (and feature statistics) from manifests.
    Vocab {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = crate::subword::DEFAULT_VOCAB_SIZE)]
        size: usize,
        #[arg(long)]
        output: PathBuf,
        /// Feature dimension used when computing normalization statistics.
        #[arg(long, default_value_t = 80)]
        d_s: usize,
    },
    /// Pretrain FAT-MLM on any mix of speech, transcription and translation data.
    Pretrain(TrainArgs),
    /// Fine-tune FAT-ST, optionally starting from a FAT-MLM checkpoint.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// FAT-MLM checkpoint to initialize encoder and decoder from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Decode a manifest; one output line per record.
    Translate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        /// Write hypotheses here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-utterance decode times as TSV (id, frames, tokens, ms); stderr when absent.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Corpus BLEU against the `text_tgt` references of a manifest.
    Eval {
        /// Needed unless `--hyp` is given.
        #[arg(long, required_unless_present = "hyp", requires = "vocab")]
        ckpt: Option<PathBuf>,
        #[arg(long, required_unless_present = "hyp")]
        vocab: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        /// Score these hypothesis lines instead of decoding.
        #[arg(long)]
        hyp: Option<PathBuf>,
        /// Add-one style smoothing for zero n-gram counts.
        #[arg(long)]
        smooth: bool,
        /// JSON report path; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write encoder self-attention maps of one utterance as CSV + PGM.
    AttentionDump {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        example: String,
        /// Restrict to these layers (repeatable).
        #[arg(long = "layer")]
        layers: Vec<usize>,
        /// Restrict to these heads (repeatable).
        #[arg(long = "head")]
        heads: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checkpoint utilities.
    #[command(subcommand)]
    Ckpt(CkptCommand),
    /// Write a synthetic (speech, transcription, translation) corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        examples: usize,
        #[arg(long, default_value = "train")]
        name: String,
        #[arg(long, default_value_t = 20)]
        d_s: usize,
    },
    /// Compute log-mel features for every `audio` record of a manifest.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        d_s: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum CkptCommand {
    /// Element-wise mean of compatible checkpoints.
    Average {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print configuration and tensor shapes as JSON.
    Inspect { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Training manifest (repeatable).
    #[arg(long = "train", required = true)]
    pub train: Vec<PathBuf>,
    /// Held-out manifest for dev-loss reporting (repeatable).
    #[arg(long = "dev")]
    pub dev: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `section.key=value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.steps=100` (repeatable).
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// Lower encoder layers see speech only; text enters at the shared layers.
    #[arg(long)]
    pub hierarchical: bool,
    /// Continue from `<out>/state.fatc`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Length penalty exponent.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Decoding threads.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Exit status for an error chain.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Diverged { .. })) {
            return EXIT_DIVERGED;
        }
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

/// The error chain joined by `: `, skipping causes a parent already quotes.
pub fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !msg.contains(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    msg
}

/// Parse arguments, run, and return the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Vocab { inputs, size, output, d_s } => cmd_vocab(&inputs, size, &output, d_s),
        Command::Pretrain(args) => cmd_train(Phase::Pretrain, &args, None, seed),
        Command::Finetune { train, init } => cmd_train(Phase::Finetune, &train, init.as_deref(), seed),
        Command::Translate {
            model,
            input,
            search,
            output,
            timing,
        } => cmd_translate(&model, &input, search, output.as_deref(), timing.as_deref()),
        Command::Eval {
            ckpt,
            vocab,
            test,
            search,
            hyp,
            smooth,
            output,
        } => {
            let model = ckpt.zip(vocab).map(|(ckpt, vocab)| ModelArgs { ckpt, vocab });
            cmd_eval(model.as_ref(), &test, search, hyp.as_deref(), smooth, output.as_deref())
        }
        Command::AttentionDump {
            model,
            input,
            example,
            layers,
            heads,
            out,
        } => cmd_attention_dump(&model, &input, &example, &layers, &heads, &out),
        Command::Ckpt(CkptCommand::Average { inputs, output }) => {
            let cks = inputs.iter().map(|p| Checkpoint::load(p).with_context(|| p.display().to_string())).collect::<Result<Vec<_>>>()?;
            average_checkpoints(&cks)?.save(&output)?;
            Ok(())
        }
        Command::Ckpt(CkptCommand::Inspect { path }) => cmd_inspect(&path),
        Command::Synth { out, examples, name, d_s } => {
            let cfg = SynthConfig {
                examples,
                d_s,
                seed: seed.unwrap_or(0),
                ..Default::default()
            };
            let exs = synth::generate(&cfg);
            let manifest = synth::write_manifest(&exs, &out, &name)?;
            synth::vocabulary()?.save(out.join("vocab.txt"))?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Featurize { input, out, d_s } => cmd_featurize(&input, &out, d_s),
    }
}

fn stats_path(vocab: &Path) -> PathBuf {
    let mut p = vocab.as_os_str().to_owned();
    p.push(".stats");
    PathBuf::from(p)
}

fn cmd_vocab(inputs: &[PathBuf], size: usize, output: &Path, d_s: usize) -> Result<()> {
    let manifests = inputs.iter().map(Manifest::read).collect::<Result<Vec<_>, _>>()?;
    let lines: Vec<&str> = manifests.iter().flat_map(|m| m.texts()).collect();
    let vocab = train_bpe(&lines, size)?;
    vocab.save(output)?;
    let mut specs = Vec::new();
    for m in &manifests {
        for (line, rec) in &m.records {
            if let Some(s) = m.load_speech(*line, rec, d_s)? {
                specs.push(s);
            }
        }
    }
    if let Some(stats) = FeatureStats::compute(&specs) {
        fs::write(stats_path(output), stats.to_text())?;
    }
    log::info!("vocabulary of {} pieces written to {}", vocab.len(), output.display());
    Ok(())
}

fn load_vocab(path: &Path) -> Result<(Vocabulary, FeatureOptions, usize)> {
    let vocab = Vocabulary::load(path).with_context(|| format!("vocabulary {}", path.display()))?;
    let sp = stats_path(path);
    let stats = if sp.exists() {
        Some(FeatureStats::from_text(&fs::read_to_string(&sp)?)?)
    } else {
        None
    };
    let d_s = stats.as_ref().map_or(80, |s| s.mean.len());
    Ok((vocab, FeatureOptions { d_s, stats }, d_s))
}

fn load_pool(paths: &[PathBuf], vocab: &Vocabulary, opts: &FeatureOptions) -> Result<Dataset> {
    let mut pool = Dataset::default();
    for p in paths {
        pool.extend(load_manifest(p, vocab, opts).with_context(|| format!("manifest {}", p.display()))?);
    }
    Ok(pool)
}

fn parse_overrides(items: &[String]) -> Result<KvConfig> {
    let mut kv = KvConfig::default();
    for item in items {
        let (k, v) = item.split_once('=').ok_or_else(|| UsageError(format!("--set expects key=value, got {item:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn cmd_train(phase: Phase, args: &TrainArgs, init: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut kv = match &args.config {
        Some(p) => KvConfig::parse(&fs::read_to_string(p).with_context(|| format!("config {}", p.display()))?)?,
        None => KvConfig::default(),
    };
    kv.merge(&parse_overrides(&args.overrides)?);
    let (vocab, mut opts, _) = load_vocab(&args.vocab)?;
    let mut tcfg = TrainConfig::from_kv(&kv)?;
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    let mut mcfg = ModelConfig::default();
    mcfg.apply_kv(&kv)?;
    mcfg.vocab_size = vocab.len();
    if args.hierarchical {
        mcfg.hierarchical = true;
    }
    if opts.stats.is_none() {
        opts.d_s = mcfg.d_s;
    } else if opts.d_s != mcfg.d_s {
        bail!(UsageError(format!("model.d_s={} but feature statistics have {} dims", mcfg.d_s, opts.d_s)));
    }
    mcfg.validate()?;
    let pool = load_pool(&args.train, &vocab, &opts)?;
    if pool.is_empty() {
        bail!("no training examples");
    }
    let dev_pool = load_pool(&args.dev, &vocab, &opts)?;
    let dev = if dev_pool.is_empty() { None } else { Some(phase_streams(phase, &dev_pool, &tcfg)?) };
    let state_path = args.out.join("state.fatc");
    let mut trainer = if args.resume && state_path.exists() {
        let state = Checkpoint::load(&state_path)?;
        let streams = phase_streams(phase, &pool, &tcfg)?;
        log::info!("resuming from step {}", state.step());
        Trainer::resume(&state, tcfg, phase, streams)?
    } else {
        match phase {
            Phase::Pretrain => {
                let model = Model::<f32>::new(pretrain_model_config(mcfg, &pool), tcfg.seed)?;
                Trainer::pretrain(model, tcfg, &pool, vocab.hash())?
            }
            Phase::Finetune => {
                let mcfg = finetune_model_config(mcfg);
                let model = match init {
                    Some(p) => init_fatst_from_fatmlm(&Checkpoint::load(p)?, &mcfg, tcfg.seed)?,
                    None => Model::<f32>::new(mcfg, tcfg.seed)?,
                };
                Trainer::finetune(model, tcfg, &pool, vocab.hash())?
            }
        }
    };
    let every = (trainer.cfg.steps / 20).max(1);
    let summary = trainer.run(&args.out, dev.as_deref(), |r| {
        if r.step % every == 0 {
            log::info!("step {} loss {:.4} lr {:.2e} |g| {:.3}", r.step, r.breakdown.total, r.lr, r.grad_norm);
        }
    })?;
    if let Some((step, d)) = summary.dev.last() {
        log::info!("dev loss at step {step}: {:.4}", d.total);
    }
    println!("{}", summary.final_path.display());
    Ok(())
}

struct Loaded {
    ck: Checkpoint,
    vocab: Vocabulary,
    opts: FeatureOptions,
}

fn load_model(args: &ModelArgs) -> Result<Loaded> {
    let ck = Checkpoint::load(&args.ckpt).with_context(|| format!("checkpoint {}", args.ckpt.display()))?;
    let (vocab, mut opts, _) = load_vocab(&args.vocab)?;
    if let Some(h) = ck.vocab_hash() {
        if h != vocab.hash() {
            bail!("checkpoint was trained with a different vocabulary than {}", args.vocab.display());
        }
    }
    opts.d_s = ck.model_config()?.d_s;
    Ok(Loaded { ck, vocab, opts })
}

#[derive(Debug, Clone)]
struct Decoded {
    text: String,
    tokens: usize,
    ms: f64,
}

fn decode_all(ck: &Checkpoint, vocab: &Vocabulary, examples: &[Arc<MultimodalExample>], search: SearchArgs) -> Result<Vec<Decoded>> {
    if search.beam == 0 {
        bail!(UsageError("--beam must be ≥ 1".into()));
    }
    let threads = search.threads.clamp(1, examples.len().max(1));
    let one = |model: &Model<f32>, e: &MultimodalExample| -> Result<Decoded> {
        let start = Instant::now();
        let source = match (&e.speech, &e.transcription) {
            (Some(s), _) => SourceInput::Speech(s),
            (None, Some(x)) => SourceInput::Text(&x.ids),
            (None, None) => bail!("{}: no speech or transcription to translate", e.id),
        };
        let h = translate(model, source, search.beam, search.alpha)?;
        let text = vocab.decode(h.output())?;
        Ok(Decoded {
            text,
            tokens: h.output().len(),
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };
    // Models hold Rc tensors, so each worker rebuilds its own from the checkpoint.
    let results: Vec<Result<Vec<(usize, Decoded)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                scope.spawn(move || -> Result<Vec<(usize, Decoded)>> {
                    let model = ck.to_model::<f32>()?;
                    (w..examples.len()).step_by(threads).map(|i| Ok((i, one(&model, &examples[i])?))).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("decoder thread panicked")))).collect()
    });
    let mut out: Vec<Option<Decoded>> = vec![None; examples.len()];
    for r in results {
        for (i, d) in r? {
            out[i] = Some(d);
        }
    }
    Ok(out.into_iter().map(|d| d.expect("every index decoded")).collect())
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_translate(args: &ModelArgs, input: &Path, search: SearchArgs, output: Option<&Path>, timing: Option<&Path>) -> Result<()> {
    let l = load_model(args)?;
    let ds = load_manifest(input, &l.vocab, &l.opts)?;
    let decoded = decode_all(&l.ck, &l.vocab, &ds.examples, search)?;
    let text: String = decoded.iter().map(|d| format!("{}\n", d.text)).collect();
    write_out(output, &text)?;
    let mut tsv = String::from("id\tframes\ttokens\tms\n");
    for (e, d) in ds.examples.iter().zip(&decoded) {
        let frames = e.speech.as_ref().map_or(0, |s| s.num_frames());
        tsv.push_str(&format!("{}\t{frames}\t{}\t{:.3}\n", e.id, d.tokens, d.ms));
    }
    match timing {
        Some(p) => fs::write(p, tsv)?,
        None => eprint!("{tsv}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct SentenceScore<'a> {
    id: &'a str,
    hyp_len: usize,
    ref_len: usize,
    bleu: f64,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    #[serde(flatten)]
    corpus: crate::inference::BleuReport,
    sentences: Vec<SentenceScore<'a>>,
}

fn cmd_eval(model: Option<&ModelArgs>, test: &Path, search: SearchArgs, hyp: Option<&Path>, smooth: bool, output: Option<&Path>) -> Result<()> {
    let manifest = Manifest::read(test)?;
    if manifest.records.is_empty() {
        bail!("empty test set {}", test.display());
    }
    let mut ids = Vec::with_capacity(manifest.records.len());
    let mut refs = Vec::with_capacity(manifest.records.len());
    for (line, rec) in &manifest.records {
        let id = rec.id.clone().unwrap_or_else(|| format!("{}:{line}", test.display()));
        let r = rec.text_tgt.as_deref().ok_or_else(|| anyhow!("{id}: no text_tgt reference"))?;
        refs.push(r.split_whitespace().collect::<Vec<_>>().join(" "));
        ids.push(id);
    }
    let hyps: Vec<String> = match (hyp, model) {
        (Some(p), _) => fs::read_to_string(p)?.lines().map(str::to_string).collect(),
        (None, Some(args)) => {
            let l = load_model(args)?;
            let ds = load_manifest(test, &l.vocab, &l.opts)?;
            decode_all(&l.ck, &l.vocab, &ds.examples, search)?.into_iter().map(|d| d.text).collect()
        }
        (None, None) => bail!(UsageError("--ckpt and --vocab are required unless --hyp is given".into())),
    };
    let corpus = corpus_bleu(&hyps, &refs, smooth)?;
    let sentences = ids
        .iter()
        .zip(hyps.iter().zip(&refs))
        .map(|(id, (h, r))| {
            let s = corpus_bleu(std::slice::from_ref(h), std::slice::from_ref(r), true)?;
            Ok(SentenceScore {
                id,
                hyp_len: s.hyp_len,
                ref_len: s.ref_len,
                bleu: s.bleu,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport { corpus, sentences };
    write_out(output, &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn cmd_attention_dump(args: &ModelArgs, input: &Path, example: &str, layers: &[usize], heads: &[usize], out: &Path) -> Result<()> {
    let l = load_model(args)?;
    let ds = load_manifest(input, &l.vocab, &l.opts)?;
    let ex = ds.find(example).ok_or_else(|| anyhow!("no example {example:?} in {}", input.display()))?;
    let model = l.ck.to_model::<f32>()?;
    let cfg = &model.config;
    if let Some(&bad) = layers.iter().find(|&&x| x >= cfg.acoustic_layers.max(cfg.shared_layers)) {
        bail!(UsageError(format!("--layer {bad} out of range")));
    }
    if let Some(&bad) = heads.iter().find(|&&h| h >= cfg.heads) {
        bail!(UsageError(format!("--head {bad} out of range (model has {} heads)", cfg.heads)));
    }
    let pick = |v: &[usize]| (!v.is_empty()).then(|| v.to_vec());
    let (ls, hs) = (pick(layers), pick(heads));
    let dumps = encoder_attention(&model, ex, ls.as_deref(), hs.as_deref())?;
    for p in write_dumps(out, &dumps)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let tensors: std::collections::BTreeMap<&str, &[usize]> = ck.tensors.iter().map(|(k, v)| (k.as_str(), v.shape())).collect();
    let params: usize = ck.tensors.values().map(|t| t.len()).sum();
    let report = serde_json::json!({
        "config": ck.config.entries,
        "parameters": params,
        "tensors": tensors,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct FeatRecord<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feats: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text_src: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text_tgt: Option<&'a str>,
}

fn cmd_featurize(input: &Path, out: &Path, d_s: usize) -> Result<()> {
    let m = Manifest::read(input)?;
    fs::create_dir_all(out.join("feats"))?;
    let mut lines = String::new();
    for (line, rec) in &m.records {
        let feats = match (&rec.audio, &rec.feats) {
            (Some(a), _) => {
                let s = waveform_to_log_mel(&load_wav(m.resolve(a))?, d_s)?;
                let rel = format!("feats/{line:06}.fatf");
                save_features(out.join(&rel), &s)?;
                Some(rel)
            }
            (None, Some(f)) => Some(m.resolve(f).display().to_string()),
            (None, None) => None,
        };
        let rec = FeatRecord {
            id: rec.id.as_deref(),
            feats,
            text_src: rec.text_src.as_deref(),
            text_tgt: rec.text_tgt.as_deref(),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    let name = input.file_name().map_or("manifest.jsonl".into(), |n| n.to_string_lossy().into_owned());
    let path = out.join(name);
    fs::write(&path, lines)?;
    println!("{}", path.display());
    Ok(())
}
