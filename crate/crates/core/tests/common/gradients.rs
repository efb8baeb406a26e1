//! Finite-difference suite over every tape primitive and every loss, on a
//! random toy configuration per seed.

use std::collections::BTreeMap;
use std::rc::Rc;

use fatspeech::corpus::{Batch, Flavor};
use fatspeech::model::{Ctx, Model, ModelConfig};
use fatspeech::numerics::{grad_check_many, Tape, Tensor, TensorError, Var};
use fatspeech::objectives::{loss_fat_mlm, loss_fat_st, loss_seq2seq, LossWeights, Source};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_of, random_example, te};

pub const TOL: f64 = 1e-4;
const PRIMITIVE_EPS: f64 = 1e-6;
const LOSS_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type Op = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

fn run(name: &str, f: Op, points: Vec<Tensor<f64>>, eps: f64, max_coords: Option<usize>, seed: u64) -> CheckResult {
    let r = grad_check_many(f, &points, eps, TOL, max_coords, seed).unwrap_or_else(|e| panic!("{name}: {e}"));
    if std::env::var("GRAD_DEBUG").is_ok() && !r.passed {
        eprintln!("{name}: {:?}", r.worst());
    }
    CheckResult {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        coords: r.coords.len(),
    }
}

/// Reduce any tensor to a scalar with a fixed random weighting so that
/// every output coordinate carries a distinct gradient.
fn probe(tape: &Tape<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    Ok(tape.sum(tape.mul(v, w)?))
}

/// Every tape primitive on shapes drawn from `seed`.
pub fn primitive_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(2..5));
    let h = rng.gen_range(1..3);
    let mut out = Vec::new();
    let mut add = |name: &str, f: Op, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng| {
        let pts = shapes.iter().map(|s| rand_tensor(rng, s)).collect();
        out.push(run(name, f, pts, PRIMITIVE_EPS, None, seed));
    };
    let s = seed;
    add("add", Box::new(move |t, v| probe(t, t.add(v[0], v[1])?, s)), &[vec![m, n], vec![m, n]], &mut rng);
    add("add_broadcast", Box::new(move |t, v| probe(t, t.add(v[0], v[1])?, s)), &[vec![m, n], vec![n]], &mut rng);
    add("sub", Box::new(move |t, v| probe(t, t.sub(v[0], v[1])?, s)), &[vec![m, n], vec![m, n]], &mut rng);
    add("mul", Box::new(move |t, v| probe(t, t.mul(v[0], v[1])?, s)), &[vec![m, n], vec![m, n]], &mut rng);
    add("scale", Box::new(move |t, v| probe(t, t.scale(v[0], 1.7), s)), &[vec![m, n]], &mut rng);
    add("matmul", Box::new(move |t, v| probe(t, t.matmul(v[0], v[1])?, s)), &[vec![m, k], vec![k, n]], &mut rng);
    add(
        "matmul_batched_trans_b",
        Box::new(move |t, v| probe(t, t.matmul_ext(v[0], v[1], true)?, s)),
        &[vec![h, m, k], vec![h, n, k]],
        &mut rng,
    );
    add("transpose", Box::new(move |t, v| probe(t, t.transpose(v[0])?, s)), &[vec![m, n]], &mut rng);
    add("reshape", Box::new(move |t, v| probe(t, t.reshape(v[0], &[n, m])?, s)), &[vec![m, n]], &mut rng);
    add("permute", Box::new(move |t, v| probe(t, t.permute(v[0], &[1, 2, 0])?, s)), &[vec![h, m, n]], &mut rng);
    add("concat", Box::new(move |t, v| probe(t, t.concat(&[v[0], v[1]], 0)?, s)), &[vec![m, n], vec![k, n]], &mut rng);
    add("slice", Box::new(move |t, v| probe(t, t.slice(v[0], 1, 1, n)?, s)), &[vec![m, n]], &mut rng);
    let ids: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..m)).collect();
    add("gather", Box::new(move |t, v| probe(t, t.gather(v[0], &ids)?, s)), &[vec![m, n]], &mut rng);
    add("softmax", Box::new(move |t, v| probe(t, t.softmax(v[0]), s)), &[vec![m, n]], &mut rng);
    add("log_softmax", Box::new(move |t, v| probe(t, t.log_softmax(v[0]), s)), &[vec![m, n]], &mut rng);
    add(
        "layer_norm",
        Box::new(move |t, v| probe(t, t.layer_norm(v[0], v[1], v[2], 1e-5)?, s)),
        &[vec![m, n + 1], vec![n + 1], vec![n + 1]],
        &mut rng,
    );
    add("relu", Box::new(move |t, v| probe(t, t.relu(v[0]), s)), &[vec![m, n]], &mut rng);
    add("gelu", Box::new(move |t, v| probe(t, t.gelu(v[0]), s)), &[vec![m, n]], &mut rng);
    let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
    let (hh, ww) = (rng.gen_range(4..8), rng.gen_range(4..8));
    add(
        "conv2d",
        Box::new(move |t, v| probe(t, t.conv2d(v[0], v[1], v[2], 2, 1)?, s)),
        &[vec![cin, hh, ww], vec![cout, cin, 3, 3], vec![cout]],
        &mut rng,
    );
    add(
        "conv_transpose2d",
        Box::new(move |t, v| probe(t, t.conv_transpose2d(v[0], v[1], v[2], 2, 0)?, s)),
        &[vec![cin, m, n], vec![cin, cout, 3, 3], vec![cout]],
        &mut rng,
    );
    add("sum", Box::new(move |t, v| Ok(t.sum(v[0]))), &[vec![m, n]], &mut rng);
    add("mean", Box::new(move |t, v| Ok(t.mean(v[0]))), &[vec![m, n]], &mut rng);
    let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    let weights: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
    let smoothing = if seed % 2 == 0 { 0.0 } else { 0.1 };
    let (tg, wt) = (targets.clone(), weights.clone());
    add(
        "cross_entropy_weighted",
        Box::new(move |t, v| t.cross_entropy_weighted(v[0], &tg, &wt, smoothing)),
        &[vec![m, n]],
        &mut rng,
    );
    let wt = weights.clone();
    add(
        "weighted_sq_err",
        Box::new(move |t, v| t.weighted_sq_err(v[0], v[1], &wt)),
        &[vec![m, n], vec![m, n]],
        &mut rng,
    );
    add("mse", Box::new(move |t, v| t.mse(v[0], v[1])), &[vec![m, n], vec![m, n]], &mut rng);
    let mask: Vec<bool> = (0..m).map(|i| i % 2 == (seed as usize) % 2).collect();
    add(
        "mask_rows",
        Box::new(move |t, v| probe(t, t.mask_rows(v[0], v[1], &mask)?, s)),
        &[vec![m, n], vec![n]],
        &mut rng,
    );
    let frames = rng.gen_range(3..7);
    let classes = rng.gen_range(2..5);
    let label_len = rng.gen_range(1..=((frames + 1) / 2).min(3));
    let labels: Vec<usize> = (0..label_len).map(|_| rng.gen_range(0..classes - 1)).collect();
    add(
        "ctc_loss",
        Box::new(move |t, v| t.ctc_loss(t.log_softmax(v[0]), &labels, classes - 1)),
        &[vec![frames, classes]],
        &mut rng,
    );
    out
}

/// A toy model configuration drawn from `seed`.
pub fn toy_config(seed: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0f1);
    let heads = *[1usize, 2].choose(&mut rng).unwrap();
    let d_model = 4 * heads * rng.gen_range(1..3);
    ModelConfig {
        d_model,
        heads,
        acoustic_layers: rng.gen_range(1..3),
        shared_layers: rng.gen_range(1..3),
        dec_layers: rng.gen_range(1..3),
        ffn_dim: d_model + rng.gen_range(0..6),
        conv_channels: rng.gen_range(1..3),
        d_s: rng.gen_range(5..10),
        vocab_size: rng.gen_range(8..14),
        tie_embeddings: rng.gen_bool(0.5),
        lang_embed: rng.gen_bool(0.5),
        hierarchical: rng.gen_bool(0.3),
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

struct LossCase {
    name: &'static str,
    eval: Box<dyn Fn(&Ctx<f64>) -> Result<Var, TensorError>>,
}

/// Every loss term and both compositions through a random toy model.
/// Parameters are perturbed on sampled coordinates of a random subset of
/// the tensors each loss touches.
pub fn loss_checks(seed: u64) -> Vec<CheckResult> {
    let cfg = toy_config(seed);
    let mut model = Model::<f64>::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fresh biases are exactly zero, which puts ReLU units fed only by
    // padding or dead inputs exactly on their kink. Check at a generic point.
    let names: Vec<String> = model.params.keys().cloned().collect();
    for n in names {
        let mut t = (**model.param(&n).unwrap()).clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        model.set_param(&n, t).unwrap();
    }
    let (v, d) = (cfg.vocab_size, cfg.d_s);
    let exs: Vec<_> = (0..2)
        .map(|i| {
            let frames = rng.gen_range(16..28);
            random_example(&format!("g{i}"), frames, rng.gen_range(1..4), rng.gen_range(1..5), v, d, rng.gen())
        })
        .collect();
    let b = |f: Flavor| batch_of(&exs, f);
    let (s, x, y, sxy, sy, xy, sx) = (b(Flavor::S), b(Flavor::X), b(Flavor::Y), b(Flavor::SXY), b(Flavor::SY), b(Flavor::XY), b(Flavor::SX));
    let mseed: u64 = rng.gen();
    let mlm_term = move |batch: Batch, pick: fn(&fatspeech::objectives::MlmTerms) -> Option<Var>| -> Box<dyn Fn(&Ctx<f64>) -> Result<Var, TensorError>> {
        Box::new(move |ctx| pick(&loss_fat_mlm(ctx, &batch, 0.0, mseed).map_err(te)?).ok_or_else(|| TensorError::Invalid { op: "loss", msg: "term absent".into() }))
    };
    let xy2 = xy.clone();
    let sy3 = sy.clone();
    let sxy2 = sxy.clone();
    let cases = vec![
        LossCase { name: "l_s", eval: mlm_term(s, |t| t.speech) },
        LossCase { name: "l_x", eval: mlm_term(x, |t| t.src) },
        LossCase { name: "l_y", eval: mlm_term(y, |t| t.tgt) },
        LossCase {
            name: "l_st",
            eval: Box::new(move |ctx| Ok(loss_seq2seq(ctx, &sy, Source::Speech, false, 0.0).map_err(te)?.nll)),
        },
        LossCase {
            name: "l_mt",
            eval: Box::new(move |ctx| Ok(loss_seq2seq(ctx, &xy, Source::Text, false, 0.0).map_err(te)?.nll)),
        },
        LossCase {
            name: "l_ctc",
            eval: Box::new(move |ctx| {
                // sxy keeps the transcription visible for the CTC target
                loss_seq2seq(ctx, &sxy2, Source::Speech, true, 0.0)
                    .map_err(te)?
                    .ctc
                    .ok_or_else(|| TensorError::Invalid { op: "loss", msg: "no feasible ctc".into() })
            }),
        },
        LossCase {
            name: "l_fat_mlm",
            eval: Box::new(move |ctx| {
                let t = loss_fat_mlm(ctx, &sxy, 0.0, mseed).map_err(te)?;
                let parts: Vec<Var> = [t.speech, t.src, t.tgt].into_iter().flatten().collect();
                let tape = ctx.tape;
                let mut acc = parts[0];
                for p in &parts[1..] {
                    acc = tape.add(acc, *p)?;
                }
                Ok(acc)
            }),
        },
        LossCase {
            name: "l_fat_st",
            eval: Box::new(move |ctx| {
                let (total, _) = loss_fat_st(ctx, Some(&sy3), Some(&xy2), &[&sx], LossWeights::default(), 0.0, mseed).map_err(te)?;
                Ok(total)
            }),
        },
    ];

    let model = Rc::new(model);
    let mut out = Vec::new();
    for case in cases {
        // Dry run to find the parameters this loss touches. Key biases only
        // shift every score of a softmax row equally, so their gradient is
        // identically zero; they are checked for exactness instead.
        let touched: Vec<String> = {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &model);
            let loss = (case.eval)(&ctx).unwrap_or_else(|e| panic!("{}: {e}", case.name));
            let mut grads = tape.backward(loss).unwrap();
            let by_name = ctx.param_grads(&mut grads);
            let worst = by_name
                .iter()
                .filter(|(k, _)| is_key_bias(k))
                .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
                .fold(0.0, f64::max);
            out.push(CheckResult {
                name: format!("{} key-bias-zero", case.name),
                max_rel_error: if worst < 1e-12 { 0.0 } else { f64::INFINITY },
                coords: 0,
            });
            ctx.bound_params().into_iter().map(|(k, _)| k).filter(|k| !is_key_bias(k)).collect()
        };
        let mut names = touched.clone();
        names.shuffle(&mut rng);
        names.truncate(6);
        names.sort();
        let points: Vec<Tensor<f64>> = names.iter().map(|n| (**model.param(n).unwrap()).clone()).collect();
        let m = Rc::clone(&model);
        let nm = names.clone();
        let eval = case.eval;
        let f: Op = Box::new(move |tape, vars| {
            let ctx = Ctx::eval(tape, &m);
            for (n, &v) in nm.iter().zip(vars) {
                ctx.bind(n, v).map_err(te)?;
            }
            eval(&ctx)
        });
        out.push(run(&format!("{} {:?}", case.name, names), f, points, LOSS_EPS, Some(4), seed));
    }
    out
}

fn is_key_bias(name: &str) -> bool {
    name.ends_with(".k.b")
}

/// Convolution followed by mean squared error on a 5×6 input.
pub fn conv_mse_check() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let pts = vec![
        rand_tensor(&mut rng, &[1, 5, 6]),
        rand_tensor(&mut rng, &[2, 1, 3, 3]),
        rand_tensor(&mut rng, &[2]),
        rand_tensor(&mut rng, &[2, 3, 3]),
    ];
    run(
        "conv2d+mse 5x6",
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            t.mse(y, v[3])
        }),
        pts,
        PRIMITIVE_EPS,
        None,
        0,
    )
}

pub fn summarize(results: &[CheckResult]) -> BTreeMap<String, f64> {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for r in results {
        let key = r.name.split(' ').next().unwrap().to_string();
        let e = worst.entry(key).or_insert(0.0);
        *e = e.max(r.max_rel_error);
    }
    worst
}
