//! Deterministic fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgcap_core::data::vocab::RESERVED;
use tgcap_core::model::{CaptionModel, ImageInputs, ModelConfig, Variant};
use tgcap_core::{ParameterStore, Tensor};

/// Desk-scale model sizes.
pub fn desk_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        vocab_size: 200,
        topics: 8,
        attributes: 64,
        feature_dim: 32,
        hidden_dim: 128,
        input_dim: 128,
        embed_dim: 64,
        spatial_proj_dim: 256,
        spatial_mlp_dim: 256,
        semantic_proj_dim: 256,
        variant,
        topic_init: true,
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_image(cfg: &ModelConfig, regions: usize, seed: u64) -> ImageInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..cfg.topics).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ImageInputs {
        features: random_tensor(&mut rng, &[regions, cfg.feature_dim]),
        topic: Tensor::vector(raw.into_iter().map(|x| x / total).collect()),
        attributes: Tensor::vector((0..cfg.attributes).map(|_| rng.gen_range(0.0..1.0)).collect()),
    }
}

/// Model, initialized parameters and one 3×3-region image.
pub fn model_fixture(variant: Variant) -> (CaptionModel, ParameterStore, ImageInputs) {
    let cfg = desk_config(variant);
    let model = CaptionModel::new(cfg).unwrap();
    let store = model.init_params(1);
    let image = random_image(&cfg, 9, 2);
    (model, store, image)
}

pub fn random_caption(vocab_size: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(RESERVED..vocab_size)).collect()
}

/// `n` candidate/reference sets over a small word pool.
pub fn text_corpus(n: usize, refs: usize, seed: u64) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    const WORDS: [&str; 16] = [
        "a", "the", "dog", "cat", "runs", "sits", "near", "on", "red", "big", "park", "ball", "field", "table",
        "in", "small",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(6..14);
        (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
    };
    let cands = (0..n).map(|_| sentence(&mut rng)).collect();
    let refsets = (0..n).map(|_| (0..refs).map(|_| sentence(&mut rng)).collect()).collect();
    (cands, refsets)
}

/// Two-topic corpus of `docs` documents over a 40-word vocabulary.
pub fn lda_corpus(docs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|d| (0..40).map(|_| (d % 2) * 20 + rng.gen_range(0..20)).collect())
        .collect()
}
