//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::gradients::{conv_mse_check, loss_checks, primitive_checks, summarize, TOL};
use common::{random_example, three_token_model, ThreeToken, D_S, VOCAB};
use fatspeech::corpus::{Dataset, ExampleView, Flavor, MultimodalExample, Objective, Stream};
use fatspeech::inference::{beam_search, corpus_bleu, exhaustive_search, translate, EncodedSource, SourceInput};
use fatspeech::masking::{mask_span, mask_token, DEFAULT_SPAN_LEN};
use fatspeech::model::{init_fatst_from_fatmlm, Checkpoint, Ctx, Model, ModelConfig};
use fatspeech::numerics::{Tape, Tensor};
use fatspeech::objectives::{loss_ctc, loss_speech_recon, parse_csv_row, Source};
use fatspeech::synth::{generate, to_dataset, vocabulary, SynthConfig};
use fatspeech::trainer::{
    dev_loss, finetune_model_config, phase_streams, pretrain_model_config, teacher_forced_accuracy, Phase, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn corpus(n: usize, seed: u64) -> Dataset {
    to_dataset(&generate(&SynthConfig { examples: n, seed, ..Default::default() }), &vocabulary().unwrap())
}

fn without_translation(ds: &Dataset) -> Dataset {
    Dataset {
        examples: ds.examples.iter().map(|e| Arc::new(MultimodalExample { translation: None, ..(**e).clone() })).collect(),
    }
}

fn toy_train(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        lr: 0.2,
        warmup: 50,
        seed,
        ..Default::default()
    }
}

fn toy_model(seed: u64) -> Model<f32> {
    Model::new(finetune_model_config(ModelConfig::tiny(vocabulary().unwrap().len(), 20)), seed).unwrap()
}

fn gradient_suite() -> Outcome {
    const CONFIGS: u64 = 10;
    let start = Instant::now();
    let mut results: Vec<_> = (0..CONFIGS).flat_map(primitive_checks).collect();
    for seed in 0..CONFIGS {
        results.extend(loss_checks(seed));
    }
    results.push(conv_mse_check());
    let elapsed = start.elapsed();
    let worst = summarize(&results);
    let (name, err) = worst.iter().fold(("", 0.0f64), |a, (k, &v)| if v > a.1 { (k, v) } else { a });
    let detail = format!(
        "{} checks over {CONFIGS} configs, {} groups, worst {name} {err:.2e} (tol {TOL:e}), {}",
        results.len(),
        worst.len(),
        secs(elapsed)
    );
    check(err < TOL && elapsed < Duration::from_secs(120), detail)
}

/// Sum of path probabilities per collapsed label, by enumerating all `C^T` paths.
fn brute_force_ctc(lp: &Tensor<f64>, blank: usize) -> HashMap<Vec<usize>, f64> {
    let (t, c) = (lp.rows(), lp.cols());
    let mut out = HashMap::new();
    let mut path = vec![0usize; t];
    loop {
        let mut label = Vec::new();
        let mut prev = None;
        let mut logp = 0.0;
        for (i, &k) in path.iter().enumerate() {
            logp += lp.row(i)[k];
            if k != blank && prev != Some(k) {
                label.push(k);
            }
            prev = Some(k);
        }
        *out.entry(label).or_insert(0.0) += logp.exp();
        let mut i = 0;
        while i < t && path[i] == c - 1 {
            path[i] = 0;
            i += 1;
        }
        if i == t {
            return out;
        }
        path[i] += 1;
    }
}

fn labels_up_to(symbols: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut all = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier.iter().flat_map(|l: &Vec<usize>| symbols.iter().map(move |&s| [l.clone(), vec![s]].concat())).collect();
        all.extend(frontier.iter().cloned());
    }
    all
}

fn ctc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut cases, mut worst, mut bad) = (0, 0.0f64, Vec::new());
    for t in 1..=6 {
        for c in 2..=4 {
            for blank in [0, c - 1] {
                let logits: Vec<f64> = (0..t * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mut data = Vec::with_capacity(t * c);
                for row in logits.chunks(c) {
                    let z = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
                    data.extend(row.iter().map(|v| v - z));
                }
                let lp = Tensor::new(&[t, c], data).unwrap();
                let brute = brute_force_ctc(&lp, blank);
                let symbols: Vec<usize> = (0..c).filter(|&k| k != blank).collect();
                for label in labels_up_to(&symbols, 3) {
                    cases += 1;
                    let dp = loss_ctc(&lp, &label, blank);
                    match brute.get(&label) {
                        Some(&p) => {
                            let err = (dp.loss - -p.ln()).abs();
                            worst = worst.max(err);
                            if dp.infeasible || err >= 1e-6 {
                                bad.push(format!("T={t} C={c} {label:?}"));
                            }
                        }
                        None if !dp.infeasible => bad.push(format!("T={t} C={c} {label:?} should be infeasible")),
                        None => {}
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("{cases} (T', C, blank, label) cases, worst |dp - brute| {worst:.2e}, {}{}", secs(elapsed), fmt_bad(&bad));
    check(bad.is_empty() && elapsed < Duration::from_secs(30), detail)
}

fn fmt_bad(bad: &[String]) -> String {
    if bad.is_empty() {
        String::new()
    } else {
        format!("; mismatches: {}", bad.iter().take(5).cloned().collect::<Vec<_>>().join(", "))
    }
}

fn beam_oracle() -> Outcome {
    let mut agree = 0;
    let mut bad = Vec::new();
    for seed in 0..20 {
        let m = three_token_model(seed);
        let enc = ThreeToken(EncodedSource::new(&m, SourceInput::Text(&[5, 6, 5])).unwrap());
        for alpha in [0.0, 0.6] {
            let b = beam_search(&enc, 81, alpha, 4);
            let e = exhaustive_search(&enc, alpha, 4);
            if b.tokens == e.tokens && b.score == e.score {
                agree += 1;
            } else {
                bad.push(format!("model {seed} alpha {alpha}"));
            }
        }
    }
    check(agree == 40, format!("beam 81 = exhaustive argmax on {agree}/40 (20 models x alpha 0, 0.6), V=3, max_len 4{}", fmt_bad(&bad)))
}

fn masking_stats() -> Outcome {
    let (n, lambda) = (10_000, 0.3);
    let (mut span_dev, mut token_dev) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        span_dev = span_dev.max((mask_span(n, lambda, DEFAULT_SPAN_LEN, seed).fraction() - lambda).abs());
        token_dev = token_dev.max((mask_token(n, lambda, seed).fraction() - lambda).abs());
    }
    let mut extremes = true;
    for seed in 0..100 {
        extremes &= mask_span(n, 0.0, DEFAULT_SPAN_LEN, seed).count() == 0 && mask_token(n, 0.0, seed).count() == 0;
        extremes &= mask_span(n, 1.0, DEFAULT_SPAN_LEN, seed).count() == n && mask_token(n, 1.0, seed).count() == n;
    }
    check(
        span_dev <= 0.03 && token_dev <= 0.03 && extremes,
        format!("max |fraction - 0.3| over 100 seeds: span {span_dev:.4}, token {token_dev:.4}; lambda 0/1 exact: {extremes}"),
    )
}

fn masked_only_reconstruction() -> Outcome {
    let (mut max_off, mut min_on, mut frames) = (0.0f64, f64::INFINITY, 0);
    for seed in 0..10u64 {
        let m = Model::<f64>::new(ModelConfig::tiny(VOCAB, D_S), seed).unwrap();
        let t = 20 + 7 * seed as usize;
        let ex = random_example("e", t, 0, 0, VOCAB, D_S, 100 + seed);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m);
        let s = ctx.spectrogram(ex.speech.as_ref().unwrap());
        let plan = mask_span(t, 0.3, DEFAULT_SPAN_LEN, seed);
        let enc = ctx.acoustic_embed(s, Some(&plan.indicator)).unwrap();
        let fused = ctx.fuse_encode(Some(enc.states), None, None).unwrap();
        let rec = ctx.reconstruct_speech(&fused, t).unwrap();
        let loss = loss_speech_recon(&tape, s, rec, &plan.indicator).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(rec).unwrap();
        for (i, &masked) in plan.indicator.iter().enumerate() {
            let row = g.row(i).iter().map(|v| v.abs()).fold(0.0, f64::max);
            if masked {
                min_on = min_on.min(row);
            } else {
                max_off = max_off.max(row);
                frames += 1;
            }
        }
    }
    check(
        max_off < 1e-12 && min_on > 0.0,
        format!("{frames} unmasked frames over 10 models: max |grad| {max_off:e}; masked frames min row max {min_on:.2e}"),
    )
}

fn decomposition() -> Outcome {
    let mut pool = corpus(16, 60);
    pool.extend(without_translation(&corpus(8, 61)));
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { ckpt_interval: 50, ..toy_train(100, 6) };
    let weights = cfg.weights;
    let mut t = Trainer::finetune(toy_model(6), cfg, &pool, 0).unwrap();
    t.run(dir.path(), None, |_| {}).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    let (mut rows, mut worst) = (0, 0.0f64);
    for line in log.lines().skip(1) {
        let (_, _, v) = parse_csv_row(line).ok_or_else(|| format!("unparsable row {line}"))?;
        let [speech, src, tgt, mlm, st, mt, ctc, total] = v;
        let recomputed = weights.st * st + weights.mt * mt + weights.mlm * (speech + src + tgt) + weights.ctc * ctc;
        worst = worst.max((total - recomputed).abs()).max((mlm - (speech + src + tgt)).abs());
        rows += 1;
    }
    check(rows == 100 && worst < 1e-6, format!("{rows} logged steps, max |total - weighted sum| {worst:.2e}"))
}

fn toy_overfit() -> Outcome {
    let start = Instant::now();
    let ds = corpus(32, 70);
    let vocab = vocabulary().unwrap().len();
    let longest = ds.examples.iter().map(|e| e.speech.as_ref().unwrap().num_frames()).max().unwrap();
    if longest > 120 || vocab > 50 {
        return Err(format!("corpus too large: {longest} frames, vocab {vocab}"));
    }
    let views: Vec<_> = ds.examples.iter().map(|e| ExampleView::restrict(e, Flavor::SY).unwrap()).collect();
    let mut t = Trainer::finetune(toy_model(7), toy_train(500, 7), &ds, 0).unwrap();
    let mut acc = 0.0;
    while t.step() < 500 {
        t.train_step().map_err(|e| e.to_string())?;
        if t.step().is_multiple_of(5) {
            acc = teacher_forced_accuracy(&t.model, &views, Source::Speech).unwrap();
            if acc >= 0.99 {
                break;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        acc >= 0.99 && elapsed < Duration::from_secs(600),
        format!("ST teacher-forced accuracy {acc:.4} at step {} (32 triplets, <= {longest} frames, vocab {vocab}), {}", t.step(), secs(elapsed)),
    )
}

const DEV_THRESHOLD: f64 = 2.5;
const FINETUNE_STEPS: u64 = 300;
const DEV_EVERY: u64 = 1;

/// First evaluation step at which dev ST NLL is at or below the threshold;
/// `FINETUNE_STEPS + 1` when it never gets there.
fn steps_to_threshold(model: Model<f32>, train: &Dataset, dev: &[Stream], seed: u64) -> (u64, f64) {
    let cfg = toy_train(FINETUNE_STEPS, seed);
    let mut t = Trainer::finetune(model, cfg.clone(), train, 0).unwrap();
    let mut best = f64::INFINITY;
    while t.step() < FINETUNE_STEPS {
        t.train_step().unwrap();
        if t.step().is_multiple_of(DEV_EVERY) {
            let nll = dev_loss(&t.model, dev, &cfg).unwrap().st;
            best = best.min(nll);
            if nll <= DEV_THRESHOLD {
                return (t.step(), best);
            }
        }
    }
    (FINETUNE_STEPS + 1, best)
}

fn pretraining_benefit() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for s in 0..5u64 {
        let pairs = without_translation(&corpus(256, 1000 + s));
        let train = corpus(32, 2000 + s);
        let dev_set = corpus(32, 3000 + s);
        let cfg = toy_train(FINETUNE_STEPS, s);
        let dev: Vec<Stream> =
            phase_streams(Phase::Finetune, &dev_set, &cfg).unwrap().into_iter().filter(|st| st.objective == Objective::St).collect();

        let mc = pretrain_model_config(ModelConfig::tiny(vocabulary().unwrap().len(), 20), &pairs);
        let mut pre = Trainer::pretrain(Model::new(mc, s).unwrap(), toy_train(500, s), &pairs, 0).unwrap();
        while pre.step() < 500 {
            pre.train_step().unwrap();
        }
        let ft_config = toy_model(s).config.clone();
        let init = init_fatst_from_fatmlm(&pre.checkpoint(), &ft_config, s).unwrap();
        let (with, best_with) = steps_to_threshold(init, &train, &dev, s);
        let (without, best_without) = steps_to_threshold(toy_model(s), &train, &dev, s);
        wins += usize::from(with < without);
        rows.push(format!("seed {s}: {with} vs {without} (best {best_with:.2}/{best_without:.2})"));
    }
    check(
        wins >= 4,
        format!("pretrained reached dev ST NLL {DEV_THRESHOLD} sooner in {wins}/5 seeds [{}], {}", rows.join("; "), secs(start.elapsed())),
    )
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..20);
    (0..n).map(|_| format!("w{}", rng.gen_range(0..12))).collect::<Vec<_>>().join(" ")
}

fn bleu_correctness() -> Outcome {
    let hand: [(&str, &str, f64); 3] = [
        ("a b c d e", "a b c d e", 100.0),
        ("the the the the", "the cat", 0.0),
        ("a b c d", "a b c d e", 77.880_078_307_140_5),
    ];
    let mut worst = 0.0f64;
    for (h, r, want) in hand {
        worst = worst.max((corpus_bleu(&[h], &[r], false).unwrap().bleu - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut identity = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..30);
        let sents: Vec<String> = (0..n).map(|_| random_sentence(&mut rng)).collect();
        identity += usize::from(corpus_bleu(&sents, &sents, false).unwrap().bleu == 100.0);
    }
    check(worst < 1e-6 && identity == 100, format!("hand examples max error {worst:.2e}; BLEU(h,h)=100 on {identity}/100 random corpora"))
}

fn reproducibility() -> Outcome {
    let ds = corpus(8, 90);
    let run = |steps: u64| {
        let mut t = Trainer::finetune(toy_model(9), toy_train(12, 9), &ds, 0).unwrap();
        let losses: Vec<f64> = (0..steps).map(|_| t.train_step().unwrap().breakdown.total).collect();
        (t, losses)
    };
    let (a, la) = run(10);
    let (b, lb) = run(10);
    let bitwise = la[9].to_bits() == lb[9].to_bits();
    let outputs = |m: &Model<f32>| -> Vec<Vec<usize>> {
        ds.examples.iter().map(|e| translate(m, SourceInput::Speech(e.speech.as_ref().unwrap()), 4, 0.6).unwrap().tokens).collect()
    };
    let same_outputs = outputs(&a.model) == outputs(&b.model);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.fatc");
    a.state().save(&path).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap(), toy_train(12, 9), Phase::Finetune, a.streams().to_vec()).unwrap();
    let (_, reference) = run(11);
    let next = resumed.train_step().unwrap().breakdown.total;
    let resume_exact = next.to_bits() == reference[10].to_bits();
    check(
        bitwise && same_outputs && resume_exact,
        format!("step-10 loss bitwise equal: {bitwise} ({:e}); translate outputs equal: {same_outputs}; resumed step 11 exact: {resume_exact}", la[9]),
    )
}

fn shape_contract() -> Outcome {
    let d_s = 80;
    let m = Model::<f32>::new(ModelConfig::tiny(30, d_s), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut lengths: Vec<usize> = vec![4, 5, 7, 8, 9, 3000];
    lengths.extend((0..20).map(|_| rng.gen_range(4..=3000)));
    let mut bad = Vec::new();
    for &t in &lengths {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m);
        let x = tape.constant(Tensor::new(&[t, d_s], (0..t * d_s).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap());
        let enc = ctx.acoustic_embed(x, None).unwrap();
        let latent = tape.shape(enc.states)[0];
        let fused = ctx.fuse_encode(Some(enc.states), None, None).unwrap();
        let rec = tape.shape(ctx.reconstruct_speech(&fused, t).unwrap());
        if latent != t.div_ceil(4) || enc.latent != latent || rec != [t, d_s] {
            bad.push(format!("T={t}: latent {latent}, reconstruction {rec:?}"));
        }
    }
    check(bad.is_empty(), format!("{} lengths in [4, 3000]: latent = ceil(T/4) and reconstruction T x {d_s}{}", lengths.len(), fmt_bad(&bad)))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "gradient suite", gradient_suite),
    (2, "ctc oracle", ctc_oracle),
    (3, "beam-search oracle", beam_oracle),
    (4, "masking statistics", masking_stats),
    (5, "masked-only reconstruction", masked_only_reconstruction),
    (6, "loss decomposition", decomposition),
    (7, "toy overfit", toy_overfit),
    (8, "pretraining benefit", pretraining_benefit),
    (9, "bleu correctness", bleu_correctness),
    (10, "reproducibility", reproducibility),
    (11, "shape contract", shape_contract),
];

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
