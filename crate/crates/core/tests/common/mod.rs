#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use srrag_core::backend::{EmbeddingClient, LlmClient, MockEmbedder, MockLlm, MockRetriever, RetrievalClient};
use srrag_core::{Backends, Gateway, GatewayConfig, PolicyDatastore, SourceRegistry};

pub const DIM: usize = 16;

pub fn corpus() -> Vec<String> {
    (0..12)
        .map(|i| format!("passage {i} about rivers painters and capitals"))
        .collect()
}

pub fn mock_backends(llm: MockLlm) -> Backends {
    Backends {
        llm: LlmClient::new(Arc::new(llm)),
        embed: EmbeddingClient::new(Arc::new(MockEmbedder::new(DIM)), DIM),
        retrievers: HashMap::from([(
            "wiki".to_string(),
            RetrievalClient::new(Arc::new(MockRetriever::new(corpus())), "wiki"),
        )]),
    }
}

pub fn two_source_config(tau: f64) -> GatewayConfig {
    let mut config = GatewayConfig::with_registry(SourceRegistry::two_source());
    config.embedding_dim = DIM;
    config.tau = tau;
    config
}

/// A store whose entries all sit in the k=30 neighborhood of any query.
pub fn labeled_store(embed: &EmbeddingClient, config: &GatewayConfig, wiki: usize, own: usize) -> PolicyDatastore {
    let mut store = PolicyDatastore::for_registry(DIM, &config.registry);
    for i in 0..wiki + own {
        let label = if i < wiki { "<Wiki>" } else { "<Self>" };
        let key = embed.embed_query(&format!("neighbor question {i}")).unwrap();
        store
            .insert_vector(&key, label, Some(format!("neighbor question {i}")))
            .unwrap();
    }
    store
}

/// Gateway with a fixed p_M, a 30-neighbor store and the mock wiki corpus.
pub fn fixture_gateway(p_wiki: f64, wiki: usize, own: usize, tau: f64) -> Gateway {
    let mut llm = MockLlm::new();
    llm.set_default_source_probs(
        [("<Self>".to_string(), 1.0 - p_wiki), ("<Wiki>".to_string(), p_wiki)]
            .into_iter()
            .collect(),
    );
    let backends = mock_backends(llm);
    let config = two_source_config(tau);
    let store = labeled_store(&backends.embed, &config, wiki, own);
    Gateway::new(config, backends, store).unwrap()
}
