//! Synthetic desk-scale data and hand-constructed models.
//!
//! Two domains with disjoint alphabets:
//! * arithmetic: `"12+7=19"`, digits and `+-*=` only;
//! * letter patterns: palindromic words such as `"abccba deed"`, lowercase and space only.
//!
//! The MCQ generators produce synthetic items labeled as such; they are not
//! real benchmark data.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::McqItem;
use crate::model::{ModelBundle, ModelConfig};
use crate::tensor::ActivationKind;
use crate::tokenizer::{BpeTokenizer, BASE_VOCAB, NUM_SPECIALS};

fn arithmetic_parts(rng: &mut ChaCha8Rng) -> (String, String) {
    let op = *[b'+', b'-', b'*'].choose(rng).expect("non-empty") as char;
    let (mut a, mut b): (u32, u32) = (rng.random_range(0..30), rng.random_range(0..30));
    if op == '*' {
        a %= 13;
        b %= 13;
    }
    if op == '-' && b > a {
        std::mem::swap(&mut a, &mut b);
    }
    let c = match op {
        '+' => a + b,
        '-' => a - b,
        _ => a * b,
    };
    (format!("{a}{op}{b}="), c.to_string())
}

pub fn arithmetic_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (q, a) = arithmetic_parts(&mut rng);
            q + &a
        })
        .collect()
}

fn palindrome_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(2..=3);
    let half: String = (0..len).map(|_| (b'a' + rng.random_range(0..8u8)) as char).collect();
    let back: String = half.chars().rev().collect();
    half + &back
}

pub fn letter_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words = rng.random_range(1..=2);
            (0..words).map(|_| palindrome_word(&mut rng)).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// Alternating arithmetic and letter entries.
pub fn mixed_corpus(n_each: usize, seed: u64) -> Vec<String> {
    let a = arithmetic_corpus(n_each, seed);
    let b = letter_corpus(n_each, seed.wrapping_add(1));
    a.into_iter().zip(b).flat_map(|(x, y)| [x, y]).collect()
}

/// Synthetic arithmetic MCQs: `"7+5="` with the true result among distractors.
pub fn arithmetic_mcq(n: usize, n_choices: usize, seed: u64) -> Vec<McqItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (question, answer) = arithmetic_parts(&mut rng);
            let truth: u32 = answer.parse().expect("numeric answer");
            let mut choices = vec![answer];
            while choices.len() < n_choices {
                let candidate = (truth + rng.random_range(1..20)).to_string();
                if !choices.contains(&candidate) {
                    choices.push(candidate);
                }
            }
            choices.shuffle(&mut rng);
            let answer_index = choices.iter().position(|c| c.parse::<u32>() == Ok(truth)).expect("present");
            McqItem {
                question,
                choices,
                answer_index,
            }
        })
        .collect()
}

/// Byte-level GELU model with random weights, for tests.
pub fn small_model(seed: u64) -> ModelBundle<f32> {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: vec![32, 32],
        vocab_size: BASE_VOCAB,
        max_seq: 16,
        activation: ActivationKind::Gelu,
        tie_lm_head: false,
        layernorm_eps: 1e-5,
    };
    ModelBundle::init(config, BpeTokenizer::byte_level(), seed).expect("valid config")
}

fn byte_id(b: u8) -> usize {
    NUM_SPECIALS + b as usize
}

/// One-layer ReLU model whose hidden units `0..4` fire only on lowercase
/// letters and units `4..8` only on everything else. Returns the model and
/// the letter-gated unit indices.
pub fn domain_gated_model() -> (ModelBundle<f32>, Vec<usize>) {
    let d = 8;
    let ff = 8;
    let config = ModelConfig {
        n_layers: 1,
        d_model: d,
        n_heads: 1,
        d_ff: vec![ff],
        vocab_size: BASE_VOCAB,
        max_seq: 32,
        activation: ActivationKind::Relu,
        tie_lm_head: false,
        layernorm_eps: 1e-5,
    };
    let mut m = ModelBundle::<f32>::zeros(config, BpeTokenizer::byte_level()).expect("valid config");
    for id in 0..BASE_VOCAB {
        let letter = (byte_id(b'a')..=byte_id(b'z')).contains(&id);
        let sign = if letter { 1.0 } else { -1.0 };
        m.token_embedding.data_mut()[id * d] = sign;
        m.token_embedding.data_mut()[id * d + 1] = -sign;
    }
    let layer = &mut m.layers[0];
    layer.ln1_gain.data_mut().fill(1.0);
    layer.ln2_gain.data_mut().fill(1.0);
    for j in 0..ff {
        let source_dim = if j < 4 { 0 } else { 1 };
        layer.mlp_in_weight.data_mut()[source_dim * ff + j] = 1.0;
    }
    m.final_ln_gain.data_mut().fill(1.0);
    (m, (0..4).collect())
}

/// Zero-layer model that predicts, after each token of `sequence`, the token
/// that follows it with near certainty. Tokens of `sequence` must be distinct
/// single bytes and at most `d_model` of them.
pub fn copy_model(sequence: &str, d_model: usize, strength: f32) -> ModelBundle<f32> {
    let bytes = sequence.as_bytes();
    assert!(bytes.len() <= d_model, "sequence longer than d_model");
    let config = ModelConfig {
        n_layers: 0,
        d_model,
        n_heads: 1,
        d_ff: vec![],
        vocab_size: BASE_VOCAB,
        max_seq: 64,
        activation: ActivationKind::Gelu,
        tie_lm_head: false,
        layernorm_eps: 1e-5,
    };
    let mut m = ModelBundle::<f32>::zeros(config, BpeTokenizer::byte_level()).expect("valid config");
    m.final_ln_gain.data_mut().fill(1.0);
    let head = m.lm_head.as_mut().expect("untied");
    for (slot, w) in bytes.windows(2).enumerate() {
        m.token_embedding.data_mut()[byte_id(w[0]) * d_model + slot] = 1.0;
        head.data_mut()[slot * BASE_VOCAB + byte_id(w[1])] = strength;
    }
    m
}
