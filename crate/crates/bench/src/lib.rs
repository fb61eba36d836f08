// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures for the benchmarks.

use factlab_core::corpus::{build_world, generate_documents, CorpusConfig, DocumentSet, WorldSpec};
use factlab_core::harness::{build_prompt_set, template_texts, PromptInstance};
use factlab_core::model::{Checkpoint, Model, ModelConfig};
use factlab_core::vocab::Vocabulary;

pub struct Fixture {
    pub world: WorldSpec,
    pub vocab: Vocabulary,
    pub docs: DocumentSet,
    pub prompts: Vec<PromptInstance>,
    pub model: Checkpoint,
}

/// A 16-country world, 2000 documents and an untrained model of the given depth.
pub fn fixture(n_layers: usize) -> Fixture {
    let world = build_world(0, 16, 1.2).expect("world");
    let cfg = CorpusConfig {
        total_docs: 2000,
        ..CorpusConfig::default()
    };
    let (vocab, docs) = generate_documents(&world, &cfg, 1, &template_texts()).expect("corpus");
    let prompts = build_prompt_set(&world, &vocab, 0).expect("prompts");
    let model = Model::init(
        ModelConfig {
            n_layers,
            n_heads: 4,
            d_model: 128,
            vocab_size: vocab.len(),
            max_context: 48,
            mlp_multiple: 4,
        },
        2,
    )
    .expect("model");
    Fixture {
        world,
        vocab,
        docs,
        prompts,
        model,
    }
}
