//! Blocking HTTP/JSON transport shared by all three backend kinds.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, Backends, CompletionRequest, CompletionResponse, CompletionTransport, EmbeddingClient,
    EmbeddingRequest, EmbeddingResponse, EmbeddingTransport, LlmClient, RetrievalClient, RetrievalRequest,
    RetrievalResponse, RetrievalTransport,
};

pub const LLM_KEY_ENV: &str = "SRRAG_LLM_KEY";
pub const EMBED_KEY_ENV: &str = "SRRAG_EMBED_KEY";
pub const RETRIEVAL_KEY_ENV: &str = "SRRAG_RETRIEVAL_KEY";

/// Counting semaphore bounding concurrent requests to one backend.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        InFlightLimit {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard { limit: self }
    }

    pub fn active(&self) -> usize {
        *self.active.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.limit.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.limit.freed.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    auth: Option<String>,
    limit: Arc<InFlightLimit>,
    retries: u32,
    backoff: Duration,
}

impl HttpTransport {
    pub fn new(
        url: &str,
        auth: Option<String>,
        timeout: Duration,
        max_in_flight: usize,
        retries: u32,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(format!("http client: {e}")))?;
        Ok(HttpTransport {
            client,
            url: url.to_string(),
            auth,
            limit: Arc::new(InFlightLimit::new(max_in_flight)),
            retries,
            backoff: Duration::from_millis(100),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn in_flight(&self) -> usize {
        self.limit.active()
    }

    /// POSTs `body`; retries only on transport failures, never on an HTTP status.
    fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, BackendError> {
        let _slot = self.limit.acquire();
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&self.url).json(body);
            if let Some(key) = &self.auth {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_client_error() {
                        return Err(BackendError::Rejected {
                            status: status.as_u16(),
                            body: resp.text().unwrap_or_default(),
                        });
                    }
                    if !status.is_success() {
                        return Err(BackendError::Unavailable(format!("{} returned {status}", self.url)));
                    }
                    return resp
                        .json::<R>()
                        .map_err(|e| BackendError::Protocol(format!("bad response body: {e}")));
                }
                Err(e) if attempt < self.retries => {
                    tracing::warn!(url = %self.url, attempt, error = %e, "transport error, retrying");
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => {
                    return Err(BackendError::Unavailable(format!("{}: {e}", self.url)));
                }
            }
        }
    }
}

impl CompletionTransport for HttpTransport {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.post(req)
    }
}

impl EmbeddingTransport for HttpTransport {
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingResponse, BackendError> {
        self.post(req)
    }
}

impl RetrievalTransport for HttpTransport {
    fn retrieve(&self, req: &RetrievalRequest) -> Result<RetrievalResponse, BackendError> {
        self.post(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmEndpoint {
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingEndpoint {
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalEndpoint {
    pub endpoint: String,
    #[serde(default)]
    pub corpus_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendsConfig {
    pub llm: LlmEndpoint,
    pub embedding: EmbeddingEndpoint,
    /// Keyed by the `backend_id` of external sources.
    pub retrieval: HashMap<String, RetrievalEndpoint>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_secs() -> u64 {
    30
}
fn default_max_in_flight() -> usize {
    16
}
fn default_retries() -> u32 {
    2
}

impl HttpBackendsConfig {
    pub fn build(&self, dim: usize) -> Result<Backends, BackendError> {
        let timeout = Duration::from_secs(self.timeout_secs);
        let transport = |url: &str, env: &str| {
            HttpTransport::new(
                url,
                std::env::var(env).ok().filter(|k| !k.is_empty()),
                timeout,
                self.max_in_flight,
                self.retries,
            )
        };
        let mut llm = LlmClient::new(Arc::new(transport(&self.llm.endpoint, LLM_KEY_ENV)?));
        if let Some(model) = &self.llm.model_id {
            llm = llm.with_model_id(model.clone());
        }
        let embed = EmbeddingClient::new(Arc::new(transport(&self.embedding.endpoint, EMBED_KEY_ENV)?), dim);
        let mut retrievers = HashMap::new();
        for (id, ep) in &self.retrieval {
            let t = transport(&ep.endpoint, RETRIEVAL_KEY_ENV)?;
            retrievers.insert(id.clone(), RetrievalClient::new(Arc::new(t), ep.corpus_id.clone()));
        }
        Ok(Backends { llm, embed, retrievers })
    }
}
