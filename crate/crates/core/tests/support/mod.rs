//! Finite-difference gradient checks in `f64`.
#![allow(dead_code)]

use minigpt_core::model::{ModelBundle, ModelConfig};
use minigpt_core::tensor::{self, ActivationKind, Tape, Tensor, Var};
use minigpt_core::tokenizer::{BpeTokenizer, BASE_VOCAB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

/// Values bounded away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// Reduces `build`'s output to a scalar with a fixed random weighting (unless it
/// already is one), then compares tape gradients of every input against
/// central differences. Returns the largest relative error.
pub fn check_op(inputs: Vec<Tensor<f64>>, seed: u64, build: Build) -> f64 {
    let weights: std::cell::RefCell<Option<Tensor<f64>>> = Default::default();
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| -> Var {
        let out = build(tape, vars);
        if tape.value(out).numel() == 1 {
            return out;
        }
        let shape = tape.value(out).shape().to_vec();
        let w = weights
            .borrow_mut()
            .get_or_insert_with(|| random(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), &shape, 1.0))
            .clone();
        let w = tape.leaf(w, false);
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod).unwrap()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let l = loss(&mut tape, &vars);
        tape.value(l).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let l = loss(&mut tape, &vars);
    let grads = tape.backward(l).unwrap();

    let mut worst = 0.0f64;
    let mut xs = inputs.clone();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("tracked input").data().to_vec();
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

fn model_config(activation: ActivationKind, tie: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: vec![12, 10],
        vocab_size: BASE_VOCAB,
        max_seq: 8,
        activation,
        tie_lm_head: tie,
        layernorm_eps: 1e-5,
    }
}

/// Whole-model check: mean next-token cross-entropy against every parameter.
pub fn check_model(activation: ActivationKind, tie: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelBundle::<f64>::init(model_config(activation, tie), BpeTokenizer::byte_level(), seed).unwrap();
    for t in model.tensors_mut() {
        for w in t.data_mut() {
            *w += rng.random_range(-0.4..0.4);
        }
    }
    // Only a handful of vocabulary rows are reachable; check every parameter
    // of the blocks and a sample of the rest to keep the run short.
    let tokens: Vec<u32> = (0..6).map(|_| rng.random_range(3..40u32)).collect();
    let targets: Vec<u32> = (0..6).map(|_| rng.random_range(3..40u32)).collect();
    let loss_of = |m: &ModelBundle<f64>| {
        let logits = m.forward(&tokens, None).unwrap();
        tensor::softmax_cross_entropy(&logits, &targets).unwrap()
    };

    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let logits = model.forward_on_tape(&mut tape, &vars, &tokens, None).unwrap();
    let l = tape.softmax_cross_entropy(logits, &targets).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = vars.ordered.iter().map(|v| grads.get(*v).unwrap().data().to_vec()).collect();

    let mut worst = 0.0f64;
    let n_tensors = analytic.len();
    for k in 0..n_tensors {
        let len = analytic[k].len();
        let stride = if len > 400 { len / 150 } else { 1 };
        let mut i = rng.random_range(0..stride);
        while i < len {
            let orig = model.tensors()[k].data()[i];
            model.tensors_mut()[k].data_mut()[i] = orig + STEP;
            let up = loss_of(&model);
            model.tensors_mut()[k].data_mut()[i] = orig - STEP;
            let down = loss_of(&model);
            model.tensors_mut()[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[k][i], (up - down) / (2.0 * STEP)));
            i += stride;
        }
    }
    worst
}

/// Every seeded instance: `(name, max relative error)`.
pub fn instances() -> Vec<(String, Box<dyn Fn() -> f64>)> {
    let mut out: Vec<(String, Box<dyn Fn() -> f64>)> = Vec::new();
    for seed in 0..2u64 {
        let r = move || ChaCha8Rng::seed_from_u64(100 + seed);
        out.push((format!("matmul/{seed}"), Box::new(move || {
            let mut g = r();
            let (a, b) = (random(&mut g, &[3, 4], 1.0), random(&mut g, &[4, 5], 1.0));
            check_op(vec![a, b], seed, Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()))
        })));
        out.push((format!("transpose/{seed}"), Box::new(move || {
            let mut g = r();
            check_op(vec![random(&mut g, &[3, 5], 1.0)], seed, Box::new(|t, v| t.transpose(v[0]).unwrap()))
        })));
        out.push((format!("add/{seed}"), Box::new(move || {
            let mut g = r();
            let (a, b) = (random(&mut g, &[4, 3], 1.0), random(&mut g, &[4, 3], 1.0));
            check_op(vec![a, b], seed, Box::new(|t, v| t.add(v[0], v[1]).unwrap()))
        })));
        out.push((format!("mul/{seed}"), Box::new(move || {
            let mut g = r();
            let (a, b) = (random(&mut g, &[4, 3], 1.0), random(&mut g, &[4, 3], 1.0));
            check_op(vec![a, b], seed, Box::new(|t, v| t.mul(v[0], v[1]).unwrap()))
        })));
        out.push((format!("add_bias/{seed}"), Box::new(move || {
            let mut g = r();
            let (a, b) = (random(&mut g, &[4, 3], 1.0), random(&mut g, &[3], 1.0));
            check_op(vec![a, b], seed, Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()))
        })));
        out.push((format!("linear/{seed}"), Box::new(move || {
            let mut g = r();
            let xs = vec![random(&mut g, &[3, 4], 1.0), random(&mut g, &[4, 2], 1.0), random(&mut g, &[2], 1.0)];
            check_op(xs, seed, Box::new(|t, v| t.linear(v[0], v[1], v[2]).unwrap()))
        })));
        out.push((format!("gelu/{seed}"), Box::new(move || {
            let mut g = r();
            check_op(vec![random(&mut g, &[4, 6], 3.0)], seed, Box::new(|t, v| t.activation(v[0], ActivationKind::Gelu).unwrap()))
        })));
        out.push((format!("relu/{seed}"), Box::new(move || {
            let mut g = r();
            check_op(vec![away_from_zero(&mut g, &[4, 6])], seed, Box::new(|t, v| t.activation(v[0], ActivationKind::Relu).unwrap()))
        })));
        out.push((format!("layernorm/{seed}"), Box::new(move || {
            let mut g = r();
            let xs = vec![random(&mut g, &[3, 6], 2.0), random(&mut g, &[6], 1.5), random(&mut g, &[6], 1.0)];
            check_op(xs, seed, Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap()))
        })));
        out.push((format!("embedding/{seed}"), Box::new(move || {
            let mut g = r();
            check_op(vec![random(&mut g, &[5, 3], 1.0)], seed, Box::new(|t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap()))
        })));
        out.push((format!("attention/{seed}"), Box::new(move || {
            let mut g = r();
            let xs = (0..3).map(|_| random(&mut g, &[5, 6], 1.0)).collect();
            check_op(xs, seed, Box::new(|t, v| t.causal_attention(v[0], v[1], v[2], 2).unwrap()))
        })));
        out.push((format!("cross_entropy/{seed}"), Box::new(move || {
            let mut g = r();
            check_op(vec![random(&mut g, &[4, 7], 2.0)], seed, Box::new(|t, v| t.softmax_cross_entropy(v[0], &[1, 6, 0, 3]).unwrap()))
        })));
        out.push((format!("sum/{seed}"), Box::new(move || {
            let mut g = r();
            check_op(vec![random(&mut g, &[3, 3], 1.0)], seed, Box::new(|t, v| t.sum(v[0]).unwrap()))
        })));
    }
    out.push(("model/gelu".into(), Box::new(|| check_model(ActivationKind::Gelu, false, 1))));
    out.push(("model/relu".into(), Box::new(|| check_model(ActivationKind::Relu, false, 2))));
    out.push(("model/gelu-tied".into(), Box::new(|| check_model(ActivationKind::Gelu, true, 3))));
    out
}
