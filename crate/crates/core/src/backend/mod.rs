//! Clients for the three external capabilities the gateway depends on:
//! completion with token log-probabilities, query embedding, and passage
//! retrieval.
//!
//! Each client owns the contract logic (renormalization, stop handling,
//! dimension checks, rank assignment) and talks to a transport. The HTTP
//! transport and the in-process mocks speak the same request/response types.

pub mod http;
pub mod mock;

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::SourceRegistry;

pub use http::{HttpBackendsConfig, HttpTransport};
pub use mock::{LoglikModel, MockBackendsConfig, MockEmbedder, MockLlm, MockRetriever};

/// Probability distribution over source tokens, in registry order.
pub type SourceDist = IndexMap<String, f64>;

pub const EOQ: &str = "<EOQ>";
pub const EOK: &str = "<EOK>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("source token {0} has no probability from the backend")]
    TokenNotInVocabulary(String),
    #[error("answer target is empty")]
    EmptyTarget,
    #[error("embedding input is empty")]
    EmptyText,
    #[error("embedding has {got} values, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("retrieval returned no passages")]
    NoResults,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend rejected request ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

// ---------------------------------------------------------------------------
// Wire schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop: Vec<String>,
    /// Tokens whose next-token log-probability should be reported.
    #[serde(default)]
    pub logprob_tokens: Vec<String>,
    /// When set, score this continuation of `prompt` instead of generating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_target: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl CompletionRequest {
    fn new(prompt: &str, max_tokens: usize) -> Self {
        CompletionRequest {
            prompt: prompt.to_string(),
            max_tokens,
            stop: Vec::new(),
            logprob_tokens: Vec::new(),
            echo_target: None,
            temperature: 0.0,
            seed: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    #[serde(default)]
    pub text: String,
    /// Next-token log-probabilities for the requested `logprob_tokens`.
    #[serde(default)]
    pub token_logprobs: HashMap<String, f64>,
    /// Per-token log-probabilities of `echo_target`.
    #[serde(default)]
    pub target_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRequest {
    pub query: String,
    pub n: usize,
    #[serde(default)]
    pub corpus_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePassage {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResponse {
    pub passages: Vec<WirePassage>,
}

pub trait CompletionTransport: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

pub trait EmbeddingTransport: Send + Sync {
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingResponse, BackendError>;
}

pub trait RetrievalTransport: Send + Sync {
    fn retrieve(&self, req: &RetrievalRequest) -> Result<RetrievalResponse, BackendError>;
}

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct LlmClient {
    transport: Arc<dyn CompletionTransport>,
    model_id: Option<String>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("model_id", &self.model_id)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(transport: Arc<dyn CompletionTransport>) -> Self {
        LlmClient {
            transport,
            model_id: None,
        }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = Some(model_id.into());
        self
    }

    fn send(&self, mut req: CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.model = self.model_id.clone();
        self.transport.complete(&req)
    }

    /// Model probability of each source token right after `<EOQ>`,
    /// renormalized over the given tokens.
    pub fn next_source_distribution(
        &self,
        prompt_prefix: &str,
        source_tokens: &[String],
    ) -> Result<SourceDist, BackendError> {
        if !prompt_prefix.trim_end().ends_with(EOQ) {
            return Err(BackendError::InvalidRequest(format!(
                "source distribution prompt must end with {EOQ}"
            )));
        }
        if source_tokens.is_empty() {
            return Err(BackendError::InvalidRequest("no source tokens".into()));
        }
        let mut req = CompletionRequest::new(prompt_prefix, 1);
        req.logprob_tokens = source_tokens.to_vec();
        let resp = self.send(req)?;

        let mut raw = Vec::with_capacity(source_tokens.len());
        for token in source_tokens {
            let lp = resp
                .token_logprobs
                .get(token)
                .copied()
                .ok_or_else(|| BackendError::TokenNotInVocabulary(token.clone()))?;
            if lp.is_nan() || lp > 0.0 {
                return Err(BackendError::Protocol(format!(
                    "log-probability {lp} for {token} is not a valid log-probability"
                )));
            }
            raw.push(lp.exp());
        }
        renormalize(source_tokens, &raw)
    }

    /// Greedy generation, cut at the first stop sequence.
    pub fn generate_greedy(
        &self,
        prompt: &str,
        stop_tokens: &[String],
        max_tokens: usize,
    ) -> Result<String, BackendError> {
        self.generate(prompt, stop_tokens, max_tokens, 0.0, None)
    }

    pub fn generate(
        &self,
        prompt: &str,
        stop_tokens: &[String],
        max_tokens: usize,
        temperature: f64,
        seed: Option<u64>,
    ) -> Result<String, BackendError> {
        if max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        let mut req = CompletionRequest::new(prompt, max_tokens);
        req.stop = stop_tokens.to_vec();
        req.temperature = temperature;
        req.seed = seed;
        let resp = self.send(req)?;
        Ok(cut_at_stop(&resp.text, stop_tokens).trim().to_string())
    }

    /// Sum of per-token log-probabilities of `target` following `prompt`.
    pub fn score_answer_loglik(&self, prompt: &str, target: &str) -> Result<f64, BackendError> {
        if target.trim().is_empty() {
            return Err(BackendError::EmptyTarget);
        }
        let mut req = CompletionRequest::new(prompt, 0);
        req.echo_target = Some(target.to_string());
        let resp = self.send(req)?;
        if resp.target_logprobs.is_empty() {
            return Err(BackendError::Protocol("no target log-probabilities returned".into()));
        }
        let total: f64 = resp.target_logprobs.iter().sum();
        if !total.is_finite() {
            return Err(BackendError::Protocol(format!("non-finite log-likelihood {total}")));
        }
        Ok(total)
    }
}

fn renormalize(tokens: &[String], raw: &[f64]) -> Result<SourceDist, BackendError> {
    let mass: f64 = raw.iter().sum();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(BackendError::Protocol("source tokens carry no probability mass".into()));
    }
    Ok(tokens.iter().zip(raw).map(|(t, p)| (t.clone(), p / mass)).collect())
}

/// Truncates `text` at the earliest occurrence of any stop sequence.
pub fn cut_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

#[derive(Clone)]
pub struct EmbeddingClient {
    transport: Arc<dyn EmbeddingTransport>,
    dim: usize,
}

impl std::fmt::Debug for EmbeddingClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingClient")
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl EmbeddingClient {
    pub fn new(transport: Arc<dyn EmbeddingTransport>, dim: usize) -> Self {
        EmbeddingClient { transport, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_query(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        let resp = self.transport.embed(&EmbeddingRequest {
            input: text.to_string(),
        })?;
        if resp.embedding.len() != self.dim {
            return Err(BackendError::DimensionMismatch {
                expected: self.dim,
                got: resp.embedding.len(),
            });
        }
        if resp.embedding.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Protocol("embedding contains non-finite values".into()));
        }
        Ok(resp.embedding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub text: String,
    pub rank: usize,
    pub score: f64,
}

#[derive(Clone)]
pub struct RetrievalClient {
    transport: Arc<dyn RetrievalTransport>,
    corpus_id: String,
}

impl std::fmt::Debug for RetrievalClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalClient")
            .field("corpus_id", &self.corpus_id)
            .finish_non_exhaustive()
    }
}

impl RetrievalClient {
    pub fn new(transport: Arc<dyn RetrievalTransport>, corpus_id: impl Into<String>) -> Self {
        RetrievalClient {
            transport,
            corpus_id: corpus_id.into(),
        }
    }

    /// Up to `n` passages, ranked 1..m by non-increasing score.
    pub fn retrieve_passages(&self, query: &str, n: usize) -> Result<Vec<Passage>, BackendError> {
        if n == 0 {
            return Err(BackendError::InvalidRequest("n must be >= 1".into()));
        }
        let resp = self.transport.retrieve(&RetrievalRequest {
            query: query.to_string(),
            n,
            corpus_id: self.corpus_id.clone(),
        })?;
        let mut hits: Vec<WirePassage> = resp
            .passages
            .into_iter()
            .filter(|p| !p.text.trim().is_empty())
            .collect();
        // stable: backend order breaks score ties
        hits.sort_by(|a, b| b.score.total_cmp(&a.score));
        hits.truncate(n);
        if hits.is_empty() {
            return Err(BackendError::NoResults);
        }
        Ok(hits
            .into_iter()
            .enumerate()
            .map(|(i, p)| Passage {
                text: p.text,
                rank: i + 1,
                score: p.score,
            })
            .collect())
    }
}

/// Backend configuration section of the gateway config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendsConfig {
    Mock(MockBackendsConfig),
    Http(HttpBackendsConfig),
}

/// The full set of clients the gateway needs, retrieval keyed by backend id.
#[derive(Debug, Clone)]
pub struct Backends {
    pub llm: LlmClient,
    pub embed: EmbeddingClient,
    pub retrievers: HashMap<String, RetrievalClient>,
}

impl Backends {
    pub fn retriever(&self, backend_id: &str) -> Result<&RetrievalClient, BackendError> {
        self.retrievers
            .get(backend_id)
            .ok_or_else(|| BackendError::Unavailable(format!("no retrieval backend bound to {backend_id:?}")))
    }

    /// Builds clients from config; every external source must have a retriever.
    pub fn from_config(config: &BackendsConfig, registry: &SourceRegistry, dim: usize) -> Result<Self, BackendError> {
        let backends = match config {
            BackendsConfig::Mock(m) => m.build(dim),
            BackendsConfig::Http(h) => h.build(dim)?,
        };
        for (_, spec) in registry.externals() {
            let id = spec.backend_id.as_deref().unwrap_or_default();
            backends.retriever(id)?;
        }
        Ok(backends)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    fn toks(t: &[&str]) -> Vec<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    fn llm_with_probs(probs: &[(&str, f64)]) -> LlmClient {
        let mut mock = MockLlm::new();
        mock.set_default_source_probs(probs.iter().map(|(t, p)| (t.to_string(), *p)).collect());
        LlmClient::new(Arc::new(mock))
    }

    #[test]
    fn renormalizes_over_source_tokens() {
        let llm = llm_with_probs(&[("<Wiki>", 0.073), ("<Self>", 0.427)]);
        let d = llm
            .next_source_distribution("Question: q Background knowledge: <EOQ>", &toks(&["<Wiki>", "<Self>"]))
            .unwrap();
        assert!(close(d["<Wiki>"], 0.146, 1e-12));
        assert!(close(d["<Self>"], 0.854, 1e-12));
    }

    #[test]
    fn degenerate_and_three_way_distributions() {
        let llm = llm_with_probs(&[("<Wiki>", 0.0), ("<Self>", 0.6)]);
        let d = llm
            .next_source_distribution("x <EOQ>", &toks(&["<Wiki>", "<Self>"]))
            .unwrap();
        assert_eq!(d["<Wiki>"], 0.0);
        assert_eq!(d["<Self>"], 1.0);

        let llm = llm_with_probs(&[("<A>", 0.2), ("<B>", 0.2), ("<C>", 0.1)]);
        let d = llm
            .next_source_distribution("x <EOQ>", &toks(&["<A>", "<B>", "<C>"]))
            .unwrap();
        assert!(close(d["<A>"], 0.4, 1e-12));
        assert!(close(d["<B>"], 0.4, 1e-12));
        assert!(close(d["<C>"], 0.2, 1e-12));
        assert!(close(d.values().sum::<f64>(), 1.0, 1e-9));
    }

    #[test]
    fn missing_token_and_bad_prefix() {
        let llm = llm_with_probs(&[("<Self>", 0.5)]);
        assert_eq!(
            llm.next_source_distribution("x <EOQ>", &toks(&["<Self>", "<Wiki>"])),
            Err(BackendError::TokenNotInVocabulary("<Wiki>".into()))
        );
        assert!(matches!(
            llm.next_source_distribution("x", &toks(&["<Self>"])),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn greedy_generation_contract() {
        let mut mock = MockLlm::new();
        mock.script("capital", "Paris is the capital. <EOK> trailing words");
        mock.script("long", &vec!["w"; 500].join(" "));
        mock.script("silent", "");
        let llm = LlmClient::new(Arc::new(mock));
        let stop = toks(&["<EOK>"]);
        assert_eq!(
            llm.generate_greedy("capital?", &stop, 150).unwrap(),
            "Paris is the capital."
        );
        let long = llm.generate_greedy("long", &stop, 150).unwrap();
        assert_eq!(long.split_whitespace().count(), 150);
        assert_eq!(llm.generate_greedy("silent", &stop, 10).unwrap(), "");
        assert!(matches!(
            llm.generate_greedy("x", &stop, 0),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn loglik_sums_per_token() {
        let mut mock = MockLlm::new();
        mock.set_loglik(LoglikModel::Table {
            per_token: [("a".to_string(), -1.0), ("b".to_string(), -2.0)].into(),
            default: -0.5,
        });
        let llm = LlmClient::new(Arc::new(mock));
        assert_eq!(llm.score_answer_loglik("p", "a b").unwrap(), -3.0);
        assert_eq!(llm.score_answer_loglik("p", "w x y z").unwrap(), -2.0);
        assert_eq!(llm.score_answer_loglik("p", ""), Err(BackendError::EmptyTarget));
    }

    #[test]
    fn embedding_dimension_checks() {
        let mut mock = MockEmbedder::new(8);
        mock.override_vector("short", vec![0.5; 7]);
        let client = EmbeddingClient::new(Arc::new(mock), 8);
        let a = client.embed_query("abc").unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, client.embed_query("abc").unwrap());
        assert_eq!(
            client.embed_query("short"),
            Err(BackendError::DimensionMismatch { expected: 8, got: 7 })
        );
        assert_eq!(client.embed_query(""), Err(BackendError::EmptyText));
    }

    #[test]
    fn retrieval_counts_and_ranks() {
        let docs: Vec<String> = (0..10).map(|i| format!("document number {i}")).collect();
        let client = RetrievalClient::new(Arc::new(MockRetriever::new(docs)), "wiki");
        let hits = client.retrieve_passages("document 3", 5).unwrap();
        assert_eq!(hits.len(), 5);
        assert_eq!(hits.iter().map(|p| p.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));

        let small = RetrievalClient::new(
            Arc::new(MockRetriever::new(vec!["a".into(), "b".into(), "c".into()])),
            "wiki",
        );
        assert_eq!(small.retrieve_passages("q", 5).unwrap().len(), 3);

        let empty = RetrievalClient::new(Arc::new(MockRetriever::new(vec![])), "wiki");
        assert_eq!(empty.retrieve_passages("q", 5), Err(BackendError::NoResults));
    }

    #[test]
    fn cut_at_earliest_stop() {
        let stop = toks(&["<EOK>", "</s>"]);
        assert_eq!(cut_at_stop("a </s> b <EOK>", &stop), "a ");
        assert_eq!(cut_at_stop("no stop", &stop), "no stop");
    }
}
