mod common;

use common::*;
use fatspeech::corpus::Flavor;
use fatspeech::masking::mask_span;
use fatspeech::model::{Ctx, Model, ModelConfig};
use fatspeech::numerics::{Tape, Tensor};
use fatspeech::objectives::{
    loss_fat_mlm, loss_fat_st, loss_seq2seq, loss_speech_recon, LossLog, LossWeights, Source,
};

fn model(vocab: usize, seed: u64) -> Model<f64> {
    Model::new(ModelConfig::tiny(vocab, D_S), seed).unwrap()
}

#[test]
fn reconstruction_gradient_is_zero_off_mask() {
    let tape = Tape::<f64>::new();
    let target = tape.constant(Tensor::full(&[40, D_S], 0.25));
    let pred = tape.variable(Tensor::from_f64(&[40, D_S], &(0..40 * D_S).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap());
    let plan = mask_span(40, 0.3, 5, 9);
    let loss = loss_speech_recon(&tape, target, pred, &plan.indicator).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(pred).unwrap();
    for (t, &m) in plan.indicator.iter().enumerate() {
        let row_max = g.row(t).iter().map(|v| v.abs()).fold(0.0, f64::max);
        if m {
            assert!(row_max > 0.0);
        } else {
            assert!(row_max < 1e-12, "frame {t}: {row_max}");
        }
    }
}

#[test]
fn reconstruction_head_gradient_is_zero_off_mask_through_the_model() {
    let m = model(VOCAB, 1);
    let ex = random_example("e", 37, 0, 0, VOCAB, D_S, 3);
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m);
    let s = ctx.spectrogram(ex.speech.as_ref().unwrap());
    let plan = mask_span(37, 0.3, 5, 4);
    let enc = ctx.acoustic_embed(s, Some(&plan.indicator)).unwrap();
    let fused = ctx.fuse_encode(Some(enc.states), None, None).unwrap();
    let rec = ctx.reconstruct_speech(&fused, 37).unwrap();
    let loss = loss_speech_recon(&tape, s, rec, &plan.indicator).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(rec).unwrap();
    for (t, &masked) in plan.indicator.iter().enumerate() {
        let row_max = g.row(t).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_eq!(masked, row_max >= 1e-12, "frame {t}");
    }
}

#[test]
fn single_modality_flavors_reduce_to_monomodal_losses() {
    let m = model(VOCAB, 2);
    let exs: Vec<_> = (0..3).map(|i| random_example(&format!("e{i}"), 40, 12, 12, VOCAB, D_S, 10 + i)).collect();
    for (flavor, expect) in [(Flavor::X, [false, true, false]), (Flavor::S, [true, false, false]), (Flavor::SXY, [true, true, true])] {
        let b = batch_of(&exs, flavor);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m);
        let (_, br) = loss_fat_st(&ctx, None, None, &[&b], LossWeights::default(), 0.0, 5).unwrap();
        assert_eq!([br.speech > 0.0, br.src > 0.0, br.tgt > 0.0], expect, "{flavor:?}");
        assert_eq!((br.st, br.mt, br.ctc), (0.0, 0.0, 0.0));
        assert!((br.total - (br.speech + br.src + br.tgt)).abs() < 1e-12);
    }
}

#[test]
fn bilingual_flavor_ignores_speech_entirely() {
    let m = model(VOCAB, 3);
    let with_speech = random_example("a", 40, 6, 7, VOCAB, D_S, 1);
    let text_only = std::sync::Arc::new(fatspeech::corpus::MultimodalExample {
        speech: None,
        ..(*with_speech).clone()
    });
    let eval = |ex| {
        let b = batch_of(&[ex], Flavor::XY);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m);
        let t = loss_fat_mlm(&ctx, &b, 0.0, 8).unwrap();
        assert!(t.speech.is_none());
        let touched_speech = ctx.bound_params().iter().any(|(k, _)| k.starts_with("enc.conv") || k == "embed.mask_speech");
        (tape.scalar_value(t.src.unwrap()), tape.scalar_value(t.tgt.unwrap()), touched_speech)
    };
    let (a, b) = (eval(with_speech), eval(text_only));
    assert_eq!(a, b);
    assert!(!a.2);
}

#[test]
fn uniform_decoder_costs_log_vocab_per_token() {
    let mut m = model(8, 4);
    m.set_param("dec.out.w", Tensor::zeros(&[32, 8])).unwrap();
    m.set_param("dec.out.b", Tensor::zeros(&[8])).unwrap();
    let exs: Vec<_> = (0..2).map(|i| random_example(&format!("e{i}"), 30, 3, 4 + i as usize, 8, D_S, i)).collect();
    for (flavor, source) in [(Flavor::SY, Source::Speech), (Flavor::XY, Source::Text)] {
        let b = batch_of(&exs, flavor);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m);
        let t = loss_seq2seq(&ctx, &b, source, false, 0.0).unwrap();
        assert!((tape.scalar_value(t.nll) - 8f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn st_and_mt_share_decoder_gradients() {
    let m = model(VOCAB, 5);
    let ex = random_example("e", 40, 5, 6, VOCAB, D_S, 6);
    let grads = |flavor, source| {
        let b = batch_of(std::slice::from_ref(&ex), flavor);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m);
        let t = loss_seq2seq(&ctx, &b, source, false, 0.0).unwrap();
        let v = tape.scalar_value(t.nll);
        let mut g = tape.backward(t.nll).unwrap();
        (v, ctx.param_grads(&mut g))
    };
    let (st, gs) = grads(Flavor::SY, Source::Speech);
    let (mt, gm) = grads(Flavor::XY, Source::Text);
    assert_ne!(st, mt);
    let dec: Vec<&String> = gs.keys().filter(|k| k.starts_with("dec.")).collect();
    assert!(!dec.is_empty());
    for k in dec {
        assert!(gm.contains_key(k), "{k}");
        assert!(gs[k].data().iter().any(|v| *v != 0.0) || k.contains(".k.b"));
    }
    assert!(gs.keys().any(|k| k.starts_with("enc.conv")));
    assert!(!gm.keys().any(|k| k.starts_with("enc.conv")));
}

#[test]
fn fat_st_total_matches_separately_evaluated_terms() {
    let m = model(VOCAB, 7);
    let exs: Vec<_> = (0..3).map(|i| random_example(&format!("e{i}"), 36 + 4 * i as usize, 4, 5, VOCAB, D_S, 20 + i)).collect();
    let (st, mt, mlm) = (batch_of(&exs, Flavor::SY), batch_of(&exs, Flavor::XY), batch_of(&exs, Flavor::SX));
    let st_ctc = batch_of(&exs, Flavor::SXY);
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m);
    let w = LossWeights::default();
    let (total, br) = loss_fat_st(&ctx, Some(&st_ctc), Some(&mt), &[&mlm], w, 0.0, 11).unwrap();
    assert!((tape.scalar_value(total) - br.total).abs() < 1e-9);

    let fresh = || Tape::<f64>::new();
    let t1 = fresh();
    let c1 = Ctx::eval(&t1, &m);
    let s = loss_seq2seq(&c1, &st, Source::Speech, true, 0.0).unwrap();
    // st has no visible transcription, but CTC reads it from the example
    let (l_st, l_ctc) = (t1.scalar_value(s.nll), t1.scalar_value(s.ctc.unwrap()));
    let t2 = fresh();
    let c2 = Ctx::eval(&t2, &m);
    let l_mt = t2.scalar_value(loss_seq2seq(&c2, &mt, Source::Text, false, 0.0).unwrap().nll);
    let t3 = fresh();
    let c3 = Ctx::eval(&t3, &m);
    let terms = loss_fat_mlm(&c3, &mlm, 0.0, fatspeech::seed::mix(&[11, 0])).unwrap();
    let l_mlm = t3.scalar_value(terms.speech.unwrap()) + t3.scalar_value(terms.src.unwrap());
    let recomputed = l_st + l_mt + l_mlm + 0.3 * l_ctc;
    assert!((br.total - recomputed).abs() < 1e-6, "{} vs {recomputed}", br.total);
    assert_eq!((br.st, br.mt, br.ctc), (l_st, l_mt, l_ctc));

    let only_st = loss_fat_st(&ctx, Some(&st), None, &[], w, 0.0, 0).unwrap().1;
    assert_eq!(only_st.total, only_st.st + 0.3 * only_st.ctc);
    let no_mt = LossWeights { mt: 0.0, ..w };
    let ablated = loss_fat_st(&ctx, Some(&st), Some(&mt), &[], no_mt, 0.0, 0).unwrap().1;
    assert!(ablated.mt > 0.0);
    assert_eq!(ablated.total, ablated.st + 0.3 * ablated.ctc);
}

#[test]
fn infeasible_ctc_examples_are_counted_not_fatal() {
    let m = model(VOCAB, 8);
    let ok = random_example("ok", 40, 3, 3, VOCAB, D_S, 1);
    let long = random_example("long", 8, 6, 3, VOCAB, D_S, 2);
    let b = batch_of(&[ok, long], Flavor::SY);
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m);
    let t = loss_seq2seq(&ctx, &b, Source::Speech, true, 0.0).unwrap();
    assert_eq!(t.ctc_infeasible, 1);
    assert!(tape.scalar_value(t.ctc.unwrap()).is_finite());
}

#[test]
fn empty_inputs_are_errors() {
    let m = model(VOCAB, 9);
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m);
    assert!(loss_fat_st(&ctx, None, None, &[], LossWeights::default(), 0.0, 0).is_err());
    let empty = fatspeech::corpus::Batch { flavor: Flavor::X, examples: vec![] };
    assert!(loss_fat_mlm(&ctx, &empty, 0.0, 0).is_err());
}

#[test]
fn loss_log_writes_header_and_rows() {
    let mut buf = Vec::new();
    {
        let mut log = LossLog::new(&mut buf).unwrap();
        let b = fatspeech::objectives::LossBreakdown { st: 1.5, total: 1.5, ..Default::default() };
        log.append(3, "st", &b).unwrap();
    }
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,flavor,speech,src,tgt,mlm,st,mt,ctc,total");
    let (step, flavor, vals) = fatspeech::objectives::parse_csv_row(lines[1]).unwrap();
    assert_eq!((step, flavor.as_str(), vals[4], vals[7]), (3, "st", 1.5, 1.5));
}
