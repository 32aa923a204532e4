//! Shared fixtures: a tiny model over a small synthetic corpus.

use mmkg_core::classifier::LabelSet;
use mmkg_core::data::Vocabulary;
use mmkg_core::model::{Ablation, Model, ModelConfig};
use mmkg_core::synth::{self, SynthSpec, SyntheticCorpus};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_emb: 8,
        d1: 12,
        d2: 6,
        n_heads: 2,
        d_corr_ffn: 8,
        max_input_len: 40,
        max_target_len: 4,
        top_k: 3,
        beam_size: 4,
        dropout: 0.0,
        ..Default::default()
    }
}

pub fn tiny_corpus(n: usize, seed: u64) -> SyntheticCorpus {
    synth::generate(&SynthSpec {
        n_samples: n,
        vocab_size: 120,
        n_topics: 4,
        noise_region_fraction: 0.3,
        avg_keyphrases: 1.0,
        seed,
    })
    .unwrap()
}

pub fn tiny_model(config: ModelConfig, corpus: &SyntheticCorpus, seed: u64) -> Model<f64> {
    let vocab = Vocabulary::build(&corpus.train, 150).unwrap();
    let labels = LabelSet::build(&corpus.train);
    Model::new(config, vocab, labels, seed).unwrap()
}

#[allow(dead_code)]
pub fn model_with_ablation(name: &str, corpus: &SyntheticCorpus, seed: u64) -> Model<f64> {
    let config = ModelConfig {
        ablation: Ablation::from_name(name).unwrap(),
        ..tiny_config()
    };
    tiny_model(config, corpus, seed)
}
