#![allow(dead_code)]

use std::sync::Arc;

use rar_core::corpus::{link_mentions, CorpusIndex};
use rar_core::datasets::{split_conversation, TrainingExample};
use rar_core::embedding::{build_embeddings, EmbeddingTable, HashEmbedder};
use rar_core::retriever::{RetrieverParams, RetrieverShape};
use rar_core::synthetic::{generate_world, WorldConfig};
use rar_core::Exec;

pub const DIM: usize = 64;

pub struct Fixture {
    pub corpus: CorpusIndex,
    pub table: Arc<EmbeddingTable>,
    pub examples: Vec<TrainingExample>,
    pub params: RetrieverParams,
}

/// A small synthetic world: 200 items, 60 conversations, 120 examples.
pub fn fixture() -> Fixture {
    let world = generate_world(&WorldConfig {
        n_items: 200,
        n_clusters: 10,
        n_users: 30,
        n_conversations: 60,
        seed: 11,
        ..WorldConfig::default()
    })
    .unwrap();
    let corpus = CorpusIndex::from_entries(world.items.clone()).unwrap();
    let table = build_embeddings(&corpus, &HashEmbedder::new(DIM).unwrap(), Exec::Sequential).unwrap();
    let examples = world
        .conversations
        .iter()
        .flat_map(|c| split_conversation(&link_mentions(c, &corpus), 64).0)
        .collect();
    let params = RetrieverParams::init(
        RetrieverShape {
            dim: DIM,
            hidden: 16,
            num_layers: 2,
            dropout_rate: 0.1,
        },
        5,
    )
    .unwrap();
    Fixture {
        corpus,
        table: Arc::new(table),
        examples,
        params,
    }
}
