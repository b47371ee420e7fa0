//! Deterministic in-process backends.
//!
//! Every output is a pure function of the request (and the seed, when
//! sampling), so runs are bit-reproducible. Tokens are whitespace-separated
//! words.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, Backends, CompletionRequest, CompletionResponse, CompletionTransport, EmbeddingClient,
    EmbeddingRequest, EmbeddingResponse, EmbeddingTransport, LlmClient, RetrievalClient, RetrievalRequest,
    RetrievalResponse, RetrievalTransport, WirePassage,
};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable hash of a sequence of string parts.
pub(crate) fn stable_hash(parts: &[&str], seed: u64) -> u64 {
    let mut h = seed;
    for p in parts {
        h = fnv1a(p.as_bytes(), h);
    }
    h
}

/// Uniform value in [0, 1) derived from a hash.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn normalize_words(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn content_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
}

/// Pulls the question out of a prompt built from the routing template.
fn extract_question(prompt: &str) -> Option<&str> {
    let start = prompt.find("Question: ")? + "Question: ".len();
    let rest = &prompt[start..];
    let end = rest.find(" Background knowledge:").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

const VOCAB: &[&str] = &[
    "the",
    "history",
    "of",
    "city",
    "river",
    "king",
    "war",
    "born",
    "novel",
    "album",
    "capital",
    "island",
    "science",
    "founded",
    "century",
    "written",
    "known",
    "famous",
    "first",
    "region",
    "population",
    "music",
    "film",
    "character",
    "revolution",
    "empire",
    "church",
    "language",
    "mountain",
    "species",
    "award",
    "team",
    "league",
    "province",
    "border",
    "treaty",
    "author",
    "painter",
    "physics",
    "chemistry",
    "disease",
    "protein",
    "cell",
    "study",
    "trial",
    "patients",
    "treatment",
    "evidence",
    "is",
    "was",
    "a",
    "an",
    "in",
    "on",
    "by",
    "with",
    "from",
    "and",
    "which",
    "during",
    "after",
    "before",
    "later",
    "early",
];

/// Per-token log-probability model used for answer scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LoglikModel {
    /// Every token scores the same.
    Constant { per_token: f64 },
    /// Lookup by token text, with a fallback.
    Table {
        per_token: HashMap<String, f64>,
        default: f64,
    },
    /// Pseudo-random in `[min, 0)`, a function of (context, token).
    Hashed { min: f64 },
    /// `hit` when the token already occurs in the context, else `miss`.
    Overlap { hit: f64, miss: f64 },
}

impl Default for LoglikModel {
    fn default() -> Self {
        LoglikModel::Hashed { min: -4.0 }
    }
}

impl LoglikModel {
    fn token_logprob(&self, context: &str, token: &str) -> f64 {
        match self {
            LoglikModel::Constant { per_token } => *per_token,
            LoglikModel::Table { per_token, default } => per_token.get(token).copied().unwrap_or(*default),
            LoglikModel::Hashed { min } => {
                let u = unit(stable_hash(&[context, "\u{1}", token], 7));
                // strictly negative so scores stay proper log-probabilities
                min * (0.01 + 0.99 * u)
            }
            LoglikModel::Overlap { hit, miss } => {
                let key: String = content_words(token).collect::<Vec<_>>().join(" ");
                if !key.is_empty() && content_words(context).any(|w| w == key) {
                    *hit
                } else {
                    *miss
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    /// Applies when the prompt contains this substring.
    pub contains: String,
    pub output: String,
}

/// Scriptable completion backend.
#[derive(Debug, Default)]
pub struct MockLlm {
    default_source_probs: Option<IndexMap<String, f64>>,
    question_source_probs: HashMap<String, IndexMap<String, f64>>,
    scripts: Vec<MockScript>,
    loglik: LoglikModel,
    delay: Duration,
    calls: AtomicUsize,
}

impl MockLlm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Raw (unnormalized) next-token probabilities used for every question
    /// without an override. Tokens missing here are out of vocabulary.
    pub fn set_default_source_probs(&mut self, probs: IndexMap<String, f64>) {
        self.default_source_probs = Some(probs);
    }

    pub fn set_question_source_probs(&mut self, question: &str, probs: IndexMap<String, f64>) {
        self.question_source_probs.insert(question.to_string(), probs);
    }

    /// First matching script wins.
    pub fn script(&mut self, contains: &str, output: &str) {
        self.scripts.push(MockScript {
            contains: contains.to_string(),
            output: output.to_string(),
        });
    }

    pub fn set_loglik(&mut self, model: LoglikModel) {
        self.loglik = model;
    }

    pub fn set_delay(&mut self, delay: Duration) {
        self.delay = delay;
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn source_logprobs(&self, prompt: &str, tokens: &[String]) -> HashMap<String, f64> {
        let question = extract_question(prompt).unwrap_or(prompt);
        let table = self
            .question_source_probs
            .get(question)
            .or(self.default_source_probs.as_ref());
        tokens
            .iter()
            .filter_map(|t| {
                let p = match table {
                    Some(tab) => *tab.get(t)?,
                    None => 0.05 + 0.9 * unit(stable_hash(&[question, t], 11)),
                };
                Some((t.clone(), p.ln()))
            })
            .collect()
    }

    fn generate_text(&self, req: &CompletionRequest) -> String {
        let raw = match self.scripts.iter().find(|s| req.prompt.contains(&s.contains)) {
            Some(s) => s.output.clone(),
            None => {
                let seed = if req.temperature > 0.0 {
                    req.seed.unwrap_or(0).wrapping_add(1)
                } else {
                    0
                };
                let h = stable_hash(&[&req.prompt], seed);
                let len = 12 + (h % 24) as usize;
                (0..len)
                    .map(|i| VOCAB[(splitmix(h ^ i as u64) % VOCAB.len() as u64) as usize])
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        };
        let capped: Vec<&str> = raw.split_whitespace().take(req.max_tokens).collect();
        let text = capped.join(" ");
        super::cut_at_stop(&text, &req.stop).to_string()
    }

    fn target_logprobs(&self, prompt: &str, target: &str) -> Vec<f64> {
        let mut context = normalize_words(prompt);
        let mut out = Vec::new();
        for token in target.split_whitespace() {
            out.push(self.loglik.token_logprob(&context, token));
            if !context.is_empty() {
                context.push(' ');
            }
            context.push_str(token);
        }
        out
    }
}

impl CompletionTransport for MockLlm {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let mut resp = CompletionResponse::default();
        if let Some(target) = &req.echo_target {
            resp.target_logprobs = self.target_logprobs(&req.prompt, target);
            return Ok(resp);
        }
        if !req.logprob_tokens.is_empty() {
            resp.token_logprobs = self.source_logprobs(&req.prompt, &req.logprob_tokens);
        }
        if req.max_tokens > 0 && req.logprob_tokens.is_empty() {
            resp.text = self.generate_text(req);
        }
        Ok(resp)
    }
}

/// Feature-hashing embedder: words land in signed buckets, plus a small
/// whole-text component so distinct inputs give distinct vectors.
#[derive(Debug)]
pub struct MockEmbedder {
    dim: usize,
    overrides: HashMap<String, Vec<f32>>,
    delay: Duration,
    calls: AtomicUsize,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        MockEmbedder {
            dim,
            overrides: HashMap::new(),
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
        }
    }

    /// Returns `vector` verbatim for `text`, whatever its length.
    pub fn override_vector(&mut self, text: &str, vector: Vec<f32>) {
        self.overrides.insert(text.to_string(), vector);
    }

    pub fn set_delay(&mut self, delay: Duration) {
        self.delay = delay;
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn vector_for(&self, text: &str) -> Vec<f32> {
        if let Some(v) = self.overrides.get(text) {
            return v.clone();
        }
        // a routing prefix is keyed by its question alone
        let text = match extract_question(text) {
            Some(q) if text.trim_end().ends_with(super::EOQ) => q,
            _ => text,
        };
        let dim = self.dim.max(1);
        let mut v = vec![0f64; dim];
        for word in content_words(text) {
            let h = stable_hash(&[&word], 3);
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            v[((h >> 1) % dim as u64) as usize] += sign;
        }
        let th = stable_hash(&[text], 5);
        for (i, x) in v.iter_mut().enumerate() {
            *x += 1e-3 * (2.0 * unit(splitmix(th ^ i as u64)) - 1.0);
        }
        v.into_iter().map(|x| x as f32).collect()
    }
}

impl EmbeddingTransport for MockEmbedder {
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Ok(EmbeddingResponse {
            embedding: self.vector_for(&req.input),
        })
    }
}

/// Word-overlap retriever over a fixed in-memory corpus.
#[derive(Debug)]
pub struct MockRetriever {
    corpus: Vec<String>,
    delay: Duration,
    calls: AtomicUsize,
}

impl MockRetriever {
    pub fn new(corpus: Vec<String>) -> Self {
        MockRetriever {
            corpus,
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn set_delay(&mut self, delay: Duration) {
        self.delay = delay;
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl RetrievalTransport for MockRetriever {
    fn retrieve(&self, req: &RetrievalRequest) -> Result<RetrievalResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let query: HashSet<String> = content_words(&req.query).collect();
        let mut scored: Vec<(usize, f64)> = self
            .corpus
            .iter()
            .enumerate()
            .map(|(i, doc)| {
                let doc_words: HashSet<String> = content_words(doc).collect();
                (i, query.intersection(&doc_words).count() as f64)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(RetrievalResponse {
            passages: scored
                .into_iter()
                .take(req.n)
                .map(|(i, score)| WirePassage {
                    text: self.corpus[i].clone(),
                    score,
                })
                .collect(),
        })
    }
}

/// Mock section of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockBackendsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_probs: Option<IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "HashMap::is_empty")]
    pub question_source_probs: HashMap<String, IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scripts: Vec<MockScript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loglik: Option<LoglikModel>,
    /// Documents per retrieval backend id.
    #[serde(default)]
    pub corpora: HashMap<String, Vec<String>>,
    #[serde(default)]
    pub retrieval_delay_ms: u64,
    #[serde(default)]
    pub generation_delay_ms: u64,
}

impl MockBackendsConfig {
    pub fn build(&self, dim: usize) -> Backends {
        let mut llm = MockLlm::new();
        if let Some(p) = &self.source_probs {
            llm.set_default_source_probs(p.clone());
        }
        for (q, p) in &self.question_source_probs {
            llm.set_question_source_probs(q, p.clone());
        }
        for s in &self.scripts {
            llm.script(&s.contains, &s.output);
        }
        if let Some(m) = &self.loglik {
            llm.set_loglik(m.clone());
        }
        llm.set_delay(Duration::from_millis(self.generation_delay_ms));
        let retrievers = self
            .corpora
            .iter()
            .map(|(id, docs)| {
                let mut r = MockRetriever::new(docs.clone());
                r.set_delay(Duration::from_millis(self.retrieval_delay_ms));
                (id.clone(), RetrievalClient::new(Arc::new(r), id.clone()))
            })
            .collect();
        Backends {
            llm: LlmClient::new(Arc::new(llm)),
            embed: EmbeddingClient::new(Arc::new(MockEmbedder::new(dim)), dim),
            retrievers,
        }
    }
}
