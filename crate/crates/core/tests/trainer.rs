use std::sync::Arc;

use fatspeech::attention::{diagonal_mass, encoder_attention};
use fatspeech::corpus::{Dataset, MultimodalExample, Objective};
use fatspeech::features::Spectrogram;
use fatspeech::model::{average_checkpoints, Checkpoint, Model, ModelConfig, Segment};
use fatspeech::numerics::Tensor;
use fatspeech::synth::{generate, to_dataset, vocabulary, SynthConfig};
use fatspeech::trainer::{
    clip_global_norm, dev_loss, finetune_model_config, list_checkpoints, pretrain_model_config, Phase, TrainConfig, TrainError, Trainer,
};
use proptest::prelude::*;

fn corpus(n: usize, seed: u64) -> Dataset {
    to_dataset(&generate(&SynthConfig { examples: n, seed, ..Default::default() }), &vocabulary().unwrap())
}

fn strip(ds: &Dataset, speech: bool, src: bool, tgt: bool) -> Dataset {
    Dataset {
        examples: ds
            .examples
            .iter()
            .map(|e| {
                Arc::new(MultimodalExample {
                    id: e.id.clone(),
                    speech: e.speech.clone().filter(|_| speech),
                    transcription: e.transcription.clone().filter(|_| src),
                    translation: e.translation.clone().filter(|_| tgt),
                })
            })
            .collect(),
    }
}

fn toy_config(vocab: usize) -> ModelConfig {
    finetune_model_config(ModelConfig::tiny(vocab, 20))
}

fn cfg(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        lr: 0.2,
        warmup: 50,
        seed,
        ckpt_interval: 4,
        dev_interval: 4,
        ..Default::default()
    }
}

fn finetuner(ds: &Dataset, steps: u64, seed: u64) -> Trainer {
    let model = Model::<f32>::new(toy_config(vocabulary().unwrap().len()), seed).unwrap();
    Trainer::finetune(model, cfg(steps, seed), ds, 0).unwrap()
}

fn losses(t: &mut Trainer, n: usize) -> Vec<f64> {
    (0..n).map(|_| t.train_step().unwrap().breakdown.total).collect()
}

#[test]
fn seed_fixed_runs_agree_bitwise() {
    let ds = corpus(8, 1);
    let a = losses(&mut finetuner(&ds, 10, 3), 10);
    let b = losses(&mut finetuner(&ds, 10, 3), 10);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let c = losses(&mut finetuner(&ds, 10, 4), 10);
    assert_ne!(a[9], c[9]);
}

#[test]
fn resumed_run_reproduces_the_next_step() {
    let ds = corpus(8, 2);
    let mut full = finetuner(&ds, 12, 5);
    let reference = losses(&mut full, 12);

    let mut head = finetuner(&ds, 12, 5);
    losses(&mut head, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.fatc");
    head.state().save(&path).unwrap();
    let state = Checkpoint::load(&path).unwrap();
    let streams = head.streams().to_vec();
    let mut tail = Trainer::resume(&state, cfg(12, 5), Phase::Finetune, streams).unwrap();
    assert_eq!(tail.step(), 7);
    let rest = losses(&mut tail, 5);
    assert_eq!(rest[0].to_bits(), reference[7].to_bits());
    assert_eq!(rest, reference[7..]);
    for (k, v) in &full.model.params {
        assert_eq!(**v, **tail.model.param(k).unwrap(), "{k}");
    }
}

#[test]
fn text_only_pretraining_never_touches_speech_parameters() {
    let text = strip(&corpus(12, 3), false, true, true);
    let mc = pretrain_model_config(ModelConfig::tiny(vocabulary().unwrap().len(), 20), &text);
    assert!(mc.lang_embed);
    let model = Model::<f32>::new(mc, 0).unwrap();
    let before = model.params.clone();
    let mut t = Trainer::pretrain(model, cfg(5, 0), &text, 0).unwrap();
    assert!(t.streams().iter().all(|s| s.objective == Objective::FatMlm && !s.flavor.has_s()));
    let ls = losses(&mut t, 5);
    assert!(ls.iter().all(|l| l.is_finite()));
    let speech = |k: &str| ["enc.conv", "embed.mask_speech", "head.recon", "head.ctc"].iter().any(|p| k.starts_with(p));
    let mut moved = 0;
    for (k, v) in &before {
        let changed = **v != **t.model.param(k).unwrap();
        if speech(k) {
            assert!(!changed, "{k} moved");
        } else {
            moved += usize::from(changed);
        }
    }
    assert!(moved > 10);
}

#[test]
fn pretraining_reduces_held_out_loss() {
    let train = strip(&corpus(32, 4), true, true, false);
    let held = strip(&corpus(8, 40), true, true, false);
    let mc = pretrain_model_config(ModelConfig::tiny(vocabulary().unwrap().len(), 20), &train);
    assert!(!mc.lang_embed);
    let c = TrainConfig { steps: 500, ..cfg(500, 1) };
    let mut t = Trainer::pretrain(Model::new(mc, 1).unwrap(), c.clone(), &train, 0).unwrap();
    let (dev, _) = fatspeech::corpus::pretrain_streams(&held, &c.bucket, 0);
    let start = dev_loss(&t.model, &dev, &c).unwrap().total;
    losses(&mut t, 500);
    let end = dev_loss(&t.model, &dev, &c).unwrap().total;
    assert!(end < 0.7 * start, "{start} -> {end}");
}

#[test]
fn triplets_decouple_and_extra_data_extends_streams() {
    let triplets = corpus(10, 5);
    let t = finetuner(&triplets, 1, 0);
    let shape = |t: &Trainer| t.streams().iter().map(|s| (s.objective, s.examples())).collect::<Vec<_>>();
    assert_eq!(shape(&t), vec![(Objective::St, 10), (Objective::Mt, 10), (Objective::FatMlm, 10)]);

    let mut pool = triplets.clone();
    pool.extend(strip(&corpus(6, 6), true, true, false));
    pool.extend(strip(&corpus(4, 7), false, true, true));
    let t = finetuner(&pool, 1, 0);
    assert_eq!(shape(&t), vec![(Objective::St, 10), (Objective::Mt, 14), (Objective::FatMlm, 16)]);

    let no_st = strip(&triplets, true, true, false);
    let model = Model::<f32>::new(toy_config(vocabulary().unwrap().len()), 0).unwrap();
    assert!(Trainer::finetune(model, cfg(1, 0), &no_st, 0).is_err());
}

#[test]
fn run_writes_logs_checkpoints_and_the_average_of_the_last_five() {
    let ds = corpus(6, 8);
    let dir = tempfile::tempdir().unwrap();
    let mut t = finetuner(&ds, 26, 2);
    let dev = t.streams().to_vec();
    let summary = t.run(dir.path(), Some(&dev), |_| {}).unwrap();
    let ckpts = list_checkpoints(dir.path()).unwrap();
    let steps: Vec<u64> = ckpts.iter().map(|p| Checkpoint::load(p).unwrap().step()).collect();
    assert_eq!(steps, vec![4, 8, 12, 16, 20, 24, 26]);
    let last5: Vec<Checkpoint> = ckpts[2..].iter().map(|p| Checkpoint::load(p).unwrap()).collect();
    let expect = average_checkpoints(&last5).unwrap();
    assert_eq!(Checkpoint::load(&summary.final_path).unwrap(), expect);

    let log = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert_eq!(log.lines().count(), 27);
    let dev_log = std::fs::read_to_string(dir.path().join("dev.csv")).unwrap();
    assert_eq!(dev_log.lines().count(), 1 + 7);
    assert_eq!(summary.dev.len(), 7);
}

#[test]
fn non_finite_input_aborts_and_keeps_finite_parameters() {
    let mut ds = corpus(4, 9);
    let bad = Arc::make_mut(&mut ds.examples[0]);
    let s = bad.speech.as_ref().unwrap();
    let mut data = s.features().data().to_vec();
    data[3] = f32::NAN;
    bad.speech = Some(Spectrogram::from_rows(s.num_frames(), s.dim(), data).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let mut t = finetuner(&ds, 5, 0);
    let err = t.run(dir.path(), None, |_| {}).unwrap_err();
    let TrainError::Diverged { step, saved: Some(path), .. } = err else { panic!("{err}") };
    assert_eq!(step, 1);
    let ck = Checkpoint::load(path).unwrap();
    assert!(ck.tensors.values().all(Tensor::all_finite));
}

/// Mean band-1 diagonal mass of acoustic speech-to-speech attention.
fn acoustic_diagonal(m: &Model<f32>, ds: &Dataset) -> f64 {
    let scores: Vec<f64> = ds.examples[..8]
        .iter()
        .flat_map(|e| encoder_attention(m, e, None, None).unwrap())
        .filter(|d| d.stack == "acoustic" && d.query == Segment::Speech)
        .map(|d| diagonal_mass(&d.weights, 1))
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn pretraining_sharpens_acoustic_attention_around_the_diagonal() {
    let ds = strip(&corpus(32, 7), true, true, false);
    let mc = pretrain_model_config(ModelConfig::tiny(vocabulary().unwrap().len(), 20), &ds);
    let model = Model::<f32>::new(mc, 3).unwrap();
    let before = acoustic_diagonal(&model, &ds);
    let mut t = Trainer::pretrain(model, cfg(200, 0), &ds, 0).unwrap();
    losses(&mut t, 200);
    let after = acoustic_diagonal(&t.model, &ds);
    assert!(after > before + 0.03, "{before} -> {after}");
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_threshold(
        vals in prop::collection::vec(-1e3f32..1e3, 1..200),
        split in 0usize..200,
        clip in 1e-3f64..10.0,
    ) {
        let split = split.min(vals.len());
        let mut g = std::collections::BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[split], vals[..split].to_vec()).unwrap());
        g.insert("b".to_string(), Tensor::new(&[vals.len() - split], vals[split..].to_vec()).unwrap());
        clip_global_norm(&mut g, clip);
        let after = clip_global_norm(&mut g, f64::INFINITY);
        prop_assert!(after <= clip + 1e-6, "{after} > {clip}");
    }
}
