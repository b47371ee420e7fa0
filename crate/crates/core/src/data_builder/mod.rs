//! Offline supervision: verbalization elicitation, context scoring, source
//! labeling and training-tuple assembly.

pub mod kmeans;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::mock::stable_hash;
use crate::backend::{BackendError, Backends, EmbeddingClient, LlmClient};
use crate::prompt::{assemble_prompt, clean_question, sanitize};
use crate::registry::{GatewayConfig, LabelingHeuristic, SourceRegistry};

pub const GENREAD_INSTRUCTION: &str = "Generate a background document from Wikipedia to help answer the following question. Directly start with document content and do not generate URL.";
pub const ASQA_SUFFIX: &str = "If the question is ambiguous, generate multiple documents for each possibility.";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no contexts from source {0}")]
    MissingSource(String),
    #[error("source {0} is not registered")]
    UnknownSource(String),
    #[error("no contexts to score")]
    EmptyContexts,
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("n must be at least 1")]
    ZeroVerbalizations,
    #[error("{path}:{line}: {msg}")]
    Json { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContext {
    pub text: String,
    pub source: String,
    pub loglik: f64,
}

/// Indices into `TrainingTuple::contexts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extremes {
    pub c_i_plus: usize,
    pub c_i_minus: usize,
    pub c_e_plus: usize,
    pub c_e_minus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_tag: Option<String>,
    pub question: String,
    pub answer: String,
    pub preferred: String,
    pub contexts: Vec<ScoredContext>,
    pub extremes: Extremes,
}

impl TrainingTuple {
    pub fn c_i_plus(&self) -> &ScoredContext {
        &self.contexts[self.extremes.c_i_plus]
    }
    pub fn c_i_minus(&self) -> &ScoredContext {
        &self.contexts[self.extremes.c_i_minus]
    }
    pub fn c_e_plus(&self) -> &ScoredContext {
        &self.contexts[self.extremes.c_e_plus]
    }
    pub fn c_e_minus(&self) -> &ScoredContext {
        &self.contexts[self.extremes.c_e_minus]
    }

    /// Per-source best log-likelihoods, the shape the datastore builder
    /// consumes.
    pub fn to_rollout(&self) -> crate::datastore::Rollout {
        let mut logliks = indexmap::IndexMap::new();
        for c in &self.contexts {
            let e = logliks.entry(c.source.clone()).or_insert(f64::NEG_INFINITY);
            if c.loglik > *e {
                *e = c.loglik;
            }
        }
        crate::datastore::Rollout {
            query: self.question.clone(),
            answer: self.answer.clone(),
            logliks,
            meta: None,
        }
    }
}

/// One input QA pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub dataset_tag: Option<String>,
}

// ---------------------------------------------------------------------------
// Verbalization elicitation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GenReadOptions {
    pub n: usize,
    pub max_tokens: usize,
    pub clusters: usize,
    pub demos_per_cluster: usize,
    pub kmeans_iterations: usize,
    /// Sampling temperature for the zero-shot round.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenReadOptions {
    fn default() -> Self {
        GenReadOptions {
            n: 5,
            max_tokens: crate::registry::DEFAULT_VERBALIZATION_MAX_TOKENS,
            clusters: 5,
            demos_per_cluster: 5,
            kmeans_iterations: 10,
            temperature: 0.7,
            seed: 0,
        }
    }
}

/// Zero-shot elicitation prompt for one question.
pub fn genread_prompt(question: &str, suffix: Option<&str>) -> String {
    let mut instruction = GENREAD_INSTRUCTION.to_string();
    if let Some(s) = suffix.filter(|s| !s.trim().is_empty()) {
        instruction.push(' ');
        instruction.push_str(s.trim());
    }
    format!(
        "{instruction}\n\nQuestion: {}\n\nBackground document:",
        clean_question(question)
    )
}

fn cap_words(text: &str, max: usize) -> String {
    sanitize(text)
        .split_whitespace()
        .take(max)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A question to verbalize plus its optional dataset-specific instruction.
#[derive(Debug, Clone, Copy)]
pub struct ElicitItem<'a> {
    pub question: &'a str,
    pub suffix: Option<&'a str>,
}

/// Two-round elicitation over a batch. Round-1 outputs are pooled across
/// the whole batch for clustering; each item then gets one generation per
/// cluster, padded with its own round-1 outputs up to `n`.
pub fn elicit_verbalizations_batch(
    items: &[ElicitItem<'_>],
    opts: &GenReadOptions,
    llm: &LlmClient,
    embed: &EmbeddingClient,
) -> Vec<Result<Vec<String>, DataError>> {
    if opts.n == 0 {
        return items.iter().map(|_| Err(DataError::ZeroVerbalizations)).collect();
    }
    let stop: Vec<String> = Vec::new();
    let round1: Vec<Result<Vec<String>, DataError>> = items
        .par_iter()
        .map(|item| {
            if clean_question(item.question).is_empty() {
                return Err(DataError::EmptyQuestion);
            }
            let prompt = genread_prompt(item.question, item.suffix);
            let base = stable_hash(&[item.question], opts.seed);
            (0..opts.n)
                .map(|j| {
                    let text = llm.generate(
                        &prompt,
                        &stop,
                        opts.max_tokens,
                        opts.temperature,
                        Some(base.wrapping_add(j as u64)),
                    )?;
                    Ok(cap_words(&text, opts.max_tokens))
                })
                .collect()
        })
        .collect();
    if opts.n == 1 {
        return round1;
    }

    // pool of (item, zero-shot text) with embeddings
    let pool: Vec<(usize, &str)> = round1
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().ok().map(|docs| (i, docs)))
        .flat_map(|(i, docs)| docs.iter().filter(|d| !d.is_empty()).map(move |d| (i, d.as_str())))
        .collect();
    let vectors: Result<Vec<Vec<f64>>, BackendError> = pool
        .par_iter()
        .map(|(_, d)| {
            let v = embed.embed_query(d)?;
            let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            Ok(v.iter().map(|x| *x as f64 / norm.max(f64::MIN_POSITIVE)).collect())
        })
        .collect();
    let vectors = match vectors {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return items
                .iter()
                .map(|_| Err(DataError::Backend(BackendError::Unavailable(msg.clone()))))
                .collect();
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let clustering = kmeans::kmeans(&vectors, opts.clusters, opts.kmeans_iterations, &mut rng);
    let demos: Vec<String> = (0..clustering.centroids.len())
        .map(|c| {
            let members = clustering.members(c);
            let mut picked: Vec<usize> = members
                .choose_multiple(&mut rng, opts.demos_per_cluster)
                .copied()
                .collect();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|p| {
                    let (item, doc) = pool[p];
                    format!(
                        "{} {}\n\n",
                        genread_prompt(items[item].question, items[item].suffix),
                        doc
                    )
                })
                .collect()
        })
        .collect();

    items
        .par_iter()
        .zip(round1)
        .map(|(item, first)| {
            let first = first?;
            let prompt = genread_prompt(item.question, item.suffix);
            let mut out = Vec::with_capacity(opts.n);
            for demo in &demos {
                let text = llm.generate_greedy(&format!("{demo}{prompt}"), &stop, opts.max_tokens)?;
                out.push(cap_words(&text, opts.max_tokens));
            }
            out.extend(first);
            out.truncate(opts.n);
            Ok(out)
        })
        .collect()
}

/// Elicits `n` verbalizations for a single question.
pub fn elicit_verbalizations(
    question: &str,
    n: usize,
    llm: &LlmClient,
    embed: &EmbeddingClient,
    dataset_prompt_suffix: Option<&str>,
    seed: u64,
) -> Result<Vec<String>, DataError> {
    let opts = GenReadOptions {
        n,
        seed,
        ..GenReadOptions::default()
    };
    let item = ElicitItem {
        question,
        suffix: dataset_prompt_suffix,
    };
    elicit_verbalizations_batch(&[item], &opts, llm, embed)
        .pop()
        .expect("one result per item")
}

// ---------------------------------------------------------------------------
// Scoring and labeling
// ---------------------------------------------------------------------------

pub fn score_contexts(
    question: &str,
    answer: &str,
    contexts: &[(String, String)],
    llm: &LlmClient,
) -> Result<Vec<ScoredContext>, DataError> {
    if answer.trim().is_empty() {
        return Err(DataError::EmptyAnswer);
    }
    if contexts.is_empty() {
        return Err(DataError::EmptyContexts);
    }
    let q = clean_question(question);
    contexts
        .iter()
        .map(|(text, source)| {
            let prompt = assemble_prompt(&q, Some(source), Some(text), true);
            Ok(ScoredContext {
                text: text.clone(),
                source: source.clone(),
                loglik: llm.score_answer_loglik(&prompt, answer)?,
            })
        })
        .collect()
}

/// Context indices ordered by log-likelihood, best first; equal scores keep
/// input order.
pub fn rank_order(contexts: &[ScoredContext]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    order.sort_by(|&a, &b| contexts[b].loglik.total_cmp(&contexts[a].loglik));
    order
}

/// Highest-valued source; ties go to the internal source, then to the
/// lowest registry index.
fn pick(values: &[f64], registry: &SourceRegistry) -> String {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let idx = if values[registry.internal_index()] == best {
        registry.internal_index()
    } else {
        values.iter().position(|v| *v == best).unwrap_or(0)
    };
    registry.sources()[idx].token.clone()
}

fn source_indices(contexts: &[ScoredContext], registry: &SourceRegistry) -> Result<Vec<usize>, DataError> {
    let idx: Vec<usize> = contexts
        .iter()
        .map(|c| {
            registry
                .index_of(&c.source)
                .ok_or_else(|| DataError::UnknownSource(c.source.clone()))
        })
        .collect::<Result<_, _>>()?;
    for (i, spec) in registry.sources().iter().enumerate() {
        if !idx.contains(&i) {
            return Err(DataError::MissingSource(spec.token.clone()));
        }
    }
    Ok(idx)
}

pub fn label_source(
    contexts: &[ScoredContext],
    registry: &SourceRegistry,
    heuristic: LabelingHeuristic,
) -> Result<String, DataError> {
    let src = source_indices(contexts, registry)?;
    let mut values = vec![0.0; registry.len()];
    match heuristic {
        LabelingHeuristic::Top50Rank => {
            let keep = contexts.len().div_ceil(2);
            for &i in rank_order(contexts).iter().take(keep) {
                values[src[i]] += 1.0;
            }
        }
        LabelingHeuristic::BestSingle => {
            values.fill(f64::NEG_INFINITY);
            for (c, &s) in contexts.iter().zip(&src) {
                values[s] = values[s].max(c.loglik);
            }
        }
        LabelingHeuristic::BestAverage => {
            let mut counts = vec![0usize; registry.len()];
            for (c, &s) in contexts.iter().zip(&src) {
                values[s] += c.loglik;
                counts[s] += 1;
            }
            for (v, n) in values.iter_mut().zip(counts) {
                *v /= n as f64;
            }
        }
        LabelingHeuristic::BestAllRank => {
            let total = contexts.len();
            for (rank, &i) in rank_order(contexts).iter().enumerate() {
                values[src[i]] += (total - (rank + 1)) as f64;
            }
        }
    }
    Ok(pick(&values, registry))
}

/// (argmax, argmin) over `indices` by log-likelihood, earliest on ties.
fn extremes_of(contexts: &[ScoredContext], indices: &[usize]) -> (usize, usize) {
    let mut hi = indices[0];
    let mut lo = indices[0];
    for &i in &indices[1..] {
        if contexts[i].loglik > contexts[hi].loglik {
            hi = i;
        }
        if contexts[i].loglik < contexts[lo].loglik {
            lo = i;
        }
    }
    (hi, lo)
}

/// Internal extremes, and external extremes taken from the preferred
/// source when it is external, otherwise from the external source holding
/// the single best context.
pub fn extract_extremes(
    contexts: &[ScoredContext],
    preferred: &str,
    registry: &SourceRegistry,
) -> Result<Extremes, DataError> {
    let src = source_indices(contexts, registry)?;
    let of = |s: usize| -> Vec<usize> { (0..contexts.len()).filter(|&i| src[i] == s).collect() };
    let (c_i_plus, c_i_minus) = extremes_of(contexts, &of(registry.internal_index()));
    let ext = match registry.index_of(preferred) {
        Some(p) if p != registry.internal_index() => p,
        _ => {
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in contexts.iter().enumerate() {
                if src[i] != registry.internal_index() && best.is_none_or(|(_, b)| c.loglik > b) {
                    best = Some((src[i], c.loglik));
                }
            }
            // several externals tied on their best context: lowest index
            let top = best.map(|(_, l)| l).unwrap_or(f64::NEG_INFINITY);
            registry
                .externals()
                .map(|(i, _)| i)
                .find(|&s| of(s).iter().any(|&i| contexts[i].loglik == top))
                .expect("registry has an external source")
        }
    };
    let (c_e_plus, c_e_minus) = extremes_of(contexts, &of(ext));
    Ok(Extremes {
        c_i_plus,
        c_i_minus,
        c_e_plus,
        c_e_minus,
    })
}

/// Scores every context, labels the tuple and extracts its extremes.
/// `per_source` is a list of (source token, context texts).
pub fn build_training_tuple(
    question: &str,
    answer: &str,
    per_source: &[(String, Vec<String>)],
    llm: &LlmClient,
    registry: &SourceRegistry,
    heuristic: LabelingHeuristic,
) -> Result<TrainingTuple, DataError> {
    for (source, texts) in per_source {
        if !registry.contains(source) {
            return Err(DataError::UnknownSource(source.clone()));
        }
        if texts.is_empty() {
            return Err(DataError::MissingSource(source.clone()));
        }
    }
    let flat: Vec<(String, String)> = per_source
        .iter()
        .flat_map(|(s, texts)| texts.iter().map(move |t| (t.clone(), s.clone())))
        .collect();
    let contexts = score_contexts(question, answer, &flat, llm)?;
    let preferred = label_source(&contexts, registry, heuristic)?;
    let extremes = extract_extremes(&contexts, &preferred, registry)?;
    Ok(TrainingTuple {
        id: None,
        dataset_tag: None,
        question: clean_question(question),
        answer: answer.trim().to_string(),
        preferred,
        contexts,
        extremes,
    })
}

/// Whether a dataset tag asks for the ambiguity instruction.
pub fn suffix_for_tag(tag: Option<&str>) -> Option<&'static str> {
    tag.filter(|t| t.eq_ignore_ascii_case("asqa")).map(|_| ASQA_SUFFIX)
}

/// Full pipeline over QA records. Verbalization runs separately per dataset
/// tag; output order follows input order.
pub fn build_dataset(
    records: &[QaRecord],
    config: &GatewayConfig,
    backends: &Backends,
    heuristic: LabelingHeuristic,
    seed: u64,
) -> Vec<Result<TrainingTuple, DataError>> {
    let registry = &config.registry;
    let mut verbalized: Vec<Option<Result<Vec<String>, DataError>>> = records.iter().map(|_| None).collect();
    let mut tags: Vec<Option<&str>> = Vec::new();
    for r in records {
        if !tags.contains(&r.dataset_tag.as_deref()) {
            tags.push(r.dataset_tag.as_deref());
        }
    }
    let opts = GenReadOptions {
        n: registry.internal().n_contexts,
        max_tokens: config.verbalization_max_tokens,
        seed,
        ..GenReadOptions::default()
    };
    for tag in tags {
        let members: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].dataset_tag.as_deref() == tag)
            .collect();
        let items: Vec<ElicitItem<'_>> = members
            .iter()
            .map(|&i| ElicitItem {
                question: &records[i].question,
                suffix: suffix_for_tag(tag),
            })
            .collect();
        for (i, r) in members.into_iter().zip(elicit_verbalizations_batch(
            &items,
            &opts,
            &backends.llm,
            &backends.embed,
        )) {
            verbalized[i] = Some(r);
        }
    }

    records
        .par_iter()
        .zip(verbalized)
        .map(|(rec, mut verb)| {
            let mut per_source = Vec::with_capacity(registry.len());
            for spec in registry.sources() {
                if spec.is_internal() {
                    per_source.push((spec.token.clone(), verb.take().expect("verbalized")?));
                } else {
                    let id = spec.backend_id.as_deref().unwrap_or_default();
                    let passages = backends
                        .retriever(id)?
                        .retrieve_passages(&rec.question, spec.n_contexts)?;
                    per_source.push((
                        spec.token.clone(),
                        passages
                            .into_iter()
                            .map(|p| sanitize(&p.text).trim().to_string())
                            .collect(),
                    ));
                }
            }
            let mut tuple = build_training_tuple(
                &rec.question,
                &rec.answer,
                &per_source,
                &backends.llm,
                registry,
                heuristic,
            )?;
            tuple.id = rec.id.clone();
            tuple.dataset_tag = rec.dataset_tag.clone();
            Ok(tuple)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Json {
            path: path.display().to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes an optional header line followed by one line per record.
pub fn write_jsonl<H: Serialize, T: Serialize>(
    path: &Path,
    header: Option<&H>,
    records: &[T],
) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |v: String| writeln!(w, "{v}").map_err(io_err(path));
    if let Some(h) = header {
        put(serde_json::to_string(h).expect("serializable"))?;
    }
    for r in records {
        put(serde_json::to_string(r).expect("serializable"))?;
    }
    w.flush().map_err(io_err(path))
}
