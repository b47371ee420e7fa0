mod common;

use std::collections::HashMap;
use std::sync::Arc;

use srrag_core::backend::http::{EmbeddingEndpoint, HttpBackendsConfig, LlmEndpoint, RetrievalEndpoint};
use srrag_core::backend::{BackendError, BackendsConfig, LlmClient, MockEmbedder, MockLlm, MockRetriever};
use srrag_core::service::backend_router;
use srrag_core::{AnswerOptions, Backends, Gateway};

use common::*;

/// Serves the mock transports over HTTP on an ephemeral port.
fn spawn_backend(llm: MockLlm) -> String {
    let app = backend_router(
        Arc::new(llm),
        Arc::new(MockEmbedder::new(DIM)),
        Arc::new(MockRetriever::new(corpus())),
    );
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn http_config(base: &str) -> HttpBackendsConfig {
    HttpBackendsConfig {
        llm: LlmEndpoint {
            endpoint: format!("{base}/complete"),
            model_id: Some("mock".into()),
        },
        embedding: EmbeddingEndpoint {
            endpoint: format!("{base}/embed"),
        },
        retrieval: HashMap::from([(
            "wiki".to_string(),
            RetrievalEndpoint {
                endpoint: format!("{base}/retrieve"),
                corpus_id: "wiki".into(),
            },
        )]),
        timeout_secs: 5,
        max_in_flight: 4,
        retries: 0,
    }
}

fn probs_llm() -> MockLlm {
    let mut llm = MockLlm::new();
    llm.set_default_source_probs(
        [("<Self>".to_string(), 0.6), ("<Wiki>".to_string(), 0.4)]
            .into_iter()
            .collect(),
    );
    llm
}

#[test]
fn http_backends_match_in_process_mocks() {
    let base = spawn_backend(probs_llm());
    let config = two_source_config(0.2);
    let remote = Backends::from_config(&BackendsConfig::Http(http_config(&base)), &config.registry, DIM).unwrap();
    let local = mock_backends(probs_llm());

    let store = labeled_store(&local.embed, &config, 12, 18);
    let remote_gw = Gateway::new(config.clone(), remote, store.clone()).unwrap();
    let local_gw = Gateway::new(config, local, store).unwrap();

    let questions: Vec<String> = (0..12).map(|i| format!("which river flows past city {i}?")).collect();
    let mut routed_external = 0;
    for (i, q) in questions.iter().enumerate() {
        let opts = AnswerOptions {
            tau_override: Some(if i % 2 == 0 { 0.0 } else { 1.0 }),
            force_source: None,
        };
        let a = remote_gw.answer_query(q, &opts).unwrap();
        let b = local_gw.answer_query(q, &opts).unwrap();
        assert_eq!(a.answer, b.answer);
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.decision, b.decision);
        routed_external += usize::from(a.decision.selected == "<Wiki>");
    }
    assert_eq!(routed_external, 6);

    let batch = remote_gw.answer_batch(&questions, &AnswerOptions::default(), 5);
    assert!(batch.iter().all(|r| r.is_ok()));
}

#[test]
fn wrong_schema_is_rejected_not_retried() {
    let base = spawn_backend(MockLlm::new());
    let mut cfg = http_config(&base);
    // the embedding route cannot parse a completion request
    cfg.llm.endpoint = format!("{base}/embed");
    let config = two_source_config(0.2);
    let b = Backends::from_config(&BackendsConfig::Http(cfg), &config.registry, DIM).unwrap();
    let err = b.llm.generate_greedy("hello", &[], 5).unwrap_err();
    assert!(
        matches!(err, BackendError::Rejected { status, .. } if (400..500).contains(&status)),
        "{err:?}"
    );
}

#[test]
fn unreachable_backend_is_unavailable() {
    let cfg = http_config("http://127.0.0.1:9");
    let transport =
        srrag_core::backend::HttpTransport::new(&cfg.llm.endpoint, None, std::time::Duration::from_millis(300), 1, 1)
            .unwrap()
            .with_backoff(std::time::Duration::from_millis(1));
    let llm = LlmClient::new(Arc::new(transport));
    assert!(matches!(
        llm.generate_greedy("q", &[], 3),
        Err(BackendError::Unavailable(_))
    ));
}
