#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redbert_core::encoder::ModelConfig;
use redbert_core::tensor::{gradcheck, Graph, ParamStore, Result, Var};
use redbert_core::tokenizer::{encode_ids, TokenizedPair, Vocab, SPECIAL_TOKENS};

/// Specials plus `w0 .. w{n-6}`, `n` tokens in total.
pub fn toy_vocab(n: usize) -> Vocab {
    let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    t.extend((t.len()..n).map(|i| format!("w{i}")));
    Vocab::from_tokens(t).unwrap()
}

pub fn tiny_config(vocab_size: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        hidden_size: 16,
        num_heads: 2,
        ff_size: 32,
        max_len,
        max_position: max_len,
        dropout: 0.0,
        dep_dim: 8,
        dep_heads: 2,
        dep_ff_size: 16,
        ..ModelConfig::desk(vocab_size)
    }
}

/// Random non-special ids.
pub fn random_ids(vocab: &Vocab, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(SPECIAL_TOKENS.len()..vocab.len())).collect()
}

pub fn random_pair(vocab: &Vocab, a: usize, b: Option<usize>, max_len: usize, rng: &mut ChaCha8Rng) -> TokenizedPair {
    let a = random_ids(vocab, a, rng);
    let b = b.map(|n| random_ids(vocab, n, rng));
    encode_ids(&a, b.as_deref(), vocab, max_len).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    gradcheck::probe(g, y, &mut rng(seed))
}

/// Tape-vs-finite-difference relative error over the trainable elements.
pub fn max_grad_error<E: From<redbert_core::tensor::TensorError> + std::fmt::Debug>(
    store: &mut ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> std::result::Result<Var, E>,
) -> f64 {
    gradcheck::max_grad_error(store, f).unwrap()
}
