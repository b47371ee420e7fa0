//! Single-pass inference: choose a source, collect knowledge (retrieve or
//! verbalize), then answer, with per-stage latency accounting.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Backends, SourceDist, EOK};
use crate::datastore::{DatastoreError, PolicyDatastore, SharedDatastore};
use crate::prompt::{assemble_prompt, clean_question, render_passages, routing_prefix, sanitize};
use crate::registry::GatewayConfig;
use crate::selector::{self, RoutingScores, SelectorError};

pub const EMPTY_DATASTORE_WARNING: &str = "policy datastore is empty; routing on model probability alone";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error("unknown source token {0}")]
    UnknownSource(String),
    #[error("threshold {0} outside [0, 1]")]
    BadTau(f64),
    #[error("question is empty")]
    EmptyQuestion,
}

/// Seconds spent in each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub t_d: f64,
    pub t_rs: f64,
    pub t_v: f64,
    pub t_g: f64,
    pub total: f64,
}

impl LatencyBreakdown {
    /// `total` is the branch sum; one of `t_rs`/`t_v` is zero on each branch.
    pub fn new(t_d: f64, t_rs: f64, t_v: f64, t_g: f64) -> Self {
        LatencyBreakdown {
            t_d,
            t_rs,
            t_v,
            t_g,
            total: t_d + t_v + t_rs + t_g,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerOptions {
    pub tau_override: Option<f64>,
    /// Skips the threshold decision; scores are still computed.
    pub force_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOutcome {
    pub question: String,
    pub scores: RoutingScores,
    pub forced: bool,
    pub warnings: Vec<String>,
    pub t_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResult {
    pub question: String,
    pub answer: String,
    pub decision: RoutingScores,
    pub knowledge: String,
    pub knowledge_origin: String,
    pub transcript: String,
    pub latency: LatencyBreakdown,
    pub warnings: Vec<String>,
}

/// Configuration, backends and datastore bundled for serving.
#[derive(Debug, Clone)]
pub struct Gateway {
    pub config: Arc<GatewayConfig>,
    pub backends: Backends,
    pub store: Arc<SharedDatastore>,
}

struct Knowledge {
    text: String,
    t_rs: f64,
    t_v: f64,
}

impl Gateway {
    /// Fails if the datastore disagrees with the registry or embedding width.
    pub fn new(config: GatewayConfig, backends: Backends, store: PolicyDatastore) -> Result<Self, GatewayError> {
        store.check_registry(&config.registry)?;
        if store.dim() != backends.embed.dim() {
            return Err(DatastoreError::DimensionMismatch {
                expected: backends.embed.dim(),
                got: store.dim(),
            }
            .into());
        }
        Ok(Gateway {
            config: Arc::new(config),
            backends,
            store: Arc::new(SharedDatastore::new(store)),
        })
    }

    fn source_tokens(&self) -> Vec<String> {
        self.config.registry.token_list()
    }

    /// Source selection only: p_M, p_D, combined scores and the decision.
    pub fn route(&self, question: &str, opts: &AnswerOptions) -> Result<RouteOutcome, GatewayError> {
        let question = clean_question(question);
        if question.is_empty() {
            return Err(GatewayError::EmptyQuestion);
        }
        let registry = &self.config.registry;
        let tau = opts.tau_override.unwrap_or(self.config.tau);
        if !(0.0..=1.0).contains(&tau) {
            return Err(GatewayError::BadTau(tau));
        }
        if let Some(forced) = &opts.force_source {
            if !registry.contains(forced) {
                return Err(GatewayError::UnknownSource(forced.clone()));
            }
        }

        let start = Instant::now();
        let prefix = routing_prefix(&question);
        let store = self.store.snapshot();
        let p_m = self
            .backends
            .llm
            .next_source_distribution(&prefix, &self.source_tokens())?;
        let mut warnings = Vec::new();
        let p_d: SourceDist = if store.is_empty() {
            warnings.push(EMPTY_DATASTORE_WARNING.to_string());
            registry.tokens().map(|t| (t.to_string(), 1.0)).collect()
        } else {
            let key = self.backends.embed.embed_query(&prefix)?;
            let neighbors = store.knn_search(&key, self.config.k_neighbors)?;
            store.neighbor_distribution(&neighbors)?
        };
        let mut scores = selector::route(p_m, p_d, registry, tau)?;
        let forced = opts.force_source.is_some();
        if let Some(f) = &opts.force_source {
            scores.selected = f.clone();
        }
        Ok(RouteOutcome {
            question,
            scores,
            forced,
            warnings,
            t_d: start.elapsed().as_secs_f64(),
        })
    }

    fn verbalize(&self, question: &str) -> Result<Knowledge, GatewayError> {
        let start = Instant::now();
        let prompt = assemble_prompt(question, Some(self.config.registry.internal_token()), None, false);
        let text =
            self.backends
                .llm
                .generate_greedy(&prompt, &[EOK.to_string()], self.config.verbalization_max_tokens)?;
        Ok(Knowledge {
            text: sanitize(&text).trim().to_string(),
            t_rs: 0.0,
            t_v: start.elapsed().as_secs_f64(),
        })
    }

    fn retrieve(&self, question: &str, source: &str) -> Result<String, GatewayError> {
        let spec = self
            .config
            .registry
            .spec(source)
            .ok_or_else(|| GatewayError::UnknownSource(source.to_string()))?;
        let backend_id = spec.backend_id.as_deref().unwrap_or_default();
        let passages = self
            .backends
            .retriever(backend_id)?
            .retrieve_passages(question, spec.n_contexts)?;
        Ok(render_passages(&passages))
    }

    fn generate_answer(&self, route: RouteOutcome, knowledge: Knowledge) -> Result<AnswerResult, GatewayError> {
        let start = Instant::now();
        let selected = route.scores.selected.clone();
        let prompt = assemble_prompt(&route.question, Some(&selected), Some(&knowledge.text), true);
        let raw = self.backends.llm.generate_greedy(
            &prompt,
            std::slice::from_ref(&self.config.eos_token),
            self.config.answer_max_tokens,
        )?;
        let answer = sanitize(&raw).trim().to_string();
        let t_g = start.elapsed().as_secs_f64();
        Ok(AnswerResult {
            transcript: format!("{prompt} {answer}"),
            question: route.question,
            answer,
            knowledge: knowledge.text,
            knowledge_origin: selected,
            latency: LatencyBreakdown::new(route.t_d, knowledge.t_rs, knowledge.t_v, t_g),
            decision: route.scores,
            warnings: route.warnings,
        })
    }

    fn is_internal(&self, token: &str) -> bool {
        self.config.registry.is_internal_token(token)
    }

    pub fn answer_query(&self, question: &str, opts: &AnswerOptions) -> Result<AnswerResult, GatewayError> {
        let route = self.route(question, opts)?;
        let knowledge = if self.is_internal(&route.scores.selected) {
            self.verbalize(&route.question)?
        } else {
            let start = Instant::now();
            let text = self.retrieve(&route.question, &route.scores.selected)?;
            Knowledge {
                text,
                t_rs: start.elapsed().as_secs_f64(),
                t_v: 0.0,
            }
        };
        self.generate_answer(route, knowledge)
    }

    /// Answers in chunks of `batch_size`. Within a chunk every retrieval runs
    /// as one batch and each retrieved item is charged the batch wall time
    /// divided by the number of items that retrieved.
    pub fn answer_batch(
        &self,
        questions: &[String],
        opts: &AnswerOptions,
        batch_size: usize,
    ) -> Vec<Result<AnswerResult, GatewayError>> {
        let batch_size = batch_size.max(1);
        let mut out = Vec::with_capacity(questions.len());
        for chunk in questions.chunks(batch_size) {
            out.extend(self.answer_chunk(chunk, opts));
        }
        out
    }

    fn answer_chunk(&self, questions: &[String], opts: &AnswerOptions) -> Vec<Result<AnswerResult, GatewayError>> {
        let routes: Vec<Result<RouteOutcome, GatewayError>> =
            questions.par_iter().map(|q| self.route(q, opts)).collect();

        let to_retrieve: Vec<usize> = routes
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match r {
                Ok(r) if !self.is_internal(&r.scores.selected) => Some(i),
                _ => None,
            })
            .collect();
        let start = Instant::now();
        let mut retrieved: Vec<Option<Result<String, GatewayError>>> = (0..questions.len()).map(|_| None).collect();
        let fetched: Vec<(usize, Result<String, GatewayError>)> = to_retrieve
            .par_iter()
            .map(|&i| {
                let r = routes[i].as_ref().expect("filtered to Ok");
                (i, self.retrieve(&r.question, &r.scores.selected))
            })
            .collect();
        let per_item = if to_retrieve.is_empty() {
            0.0
        } else {
            start.elapsed().as_secs_f64() / to_retrieve.len() as f64
        };
        for (i, r) in fetched {
            retrieved[i] = Some(r);
        }

        routes
            .into_par_iter()
            .zip(retrieved)
            .map(|(route, fetched)| {
                let route = route?;
                let knowledge = match fetched {
                    Some(text) => Knowledge {
                        text: text?,
                        t_rs: per_item,
                        t_v: 0.0,
                    },
                    None => self.verbalize(&route.question)?,
                };
                self.generate_answer(route, knowledge)
            })
            .collect()
    }
}

/// Fraction of results routed to an external source.
pub fn rag_rate(results: &[AnswerResult], config: &GatewayConfig) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let external = results
        .iter()
        .filter(|r| !config.registry.is_internal_token(&r.knowledge_origin))
        .count();
    external as f64 / results.len() as f64
}
