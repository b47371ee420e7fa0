//! SFT and DPO training files built from labeled tuples.
//!
//! Spans are byte ranges into the UTF-8 text; the trainer re-tokenizes and
//! applies loss only inside them.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::backend::EOK;
use crate::data_builder::{write_jsonl, DataError, TrainingTuple};
use crate::prompt::{assemble_prompt, render_full};
use crate::registry::{LabelingHeuristic, SourceRegistry};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DPO_BETA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub text: String,
    pub train_spans: Vec<(usize, usize)>,
    pub preferred: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub beta: f64,
}

/// First line of every emitted file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub format_version: u32,
    pub seed: u64,
    pub lambda: f64,
    pub heuristic: LabelingHeuristic,
}

/// Number of extra retrieved contexts: max(p − 1, 0) with p ~ Poisson(λ).
pub fn sample_extra_count<R: Rng>(rng: &mut R, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let p: f64 = Poisson::new(lambda).expect("positive finite lambda").sample(rng);
    (p as usize).saturating_sub(1)
}

fn numbered(texts: &[&str]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("[{}] {}", i + 1, t.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One SFT record per tuple, in input order. Extra contexts for external
/// tuples are drawn from one RNG seeded with `seed`.
pub fn emit_sft_records(tuples: &[TrainingTuple], registry: &SourceRegistry, lambda: f64, seed: u64) -> Vec<SftRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tuples
        .iter()
        .map(|t| {
            let internal = registry.is_internal_token(&t.preferred);
            let knowledge = if internal {
                t.c_i_plus().text.trim().to_string()
            } else {
                let best = t.c_e_plus();
                let mut pool: Vec<&str> = Vec::new();
                for c in t.contexts.iter().filter(|c| c.source == t.preferred) {
                    if c.text != best.text && !pool.contains(&c.text.as_str()) {
                        pool.push(&c.text);
                    }
                }
                let extra = sample_extra_count(&mut rng, lambda).min(pool.len());
                let mut picked: Vec<&str> = vec![&best.text];
                picked.extend(sample(&mut rng, pool.len(), extra).into_iter().map(|i| pool[i]));
                numbered(&picked)
            };
            let (text, spans) = render_full(&t.question, &t.preferred, &knowledge, &t.answer);
            let mut train_spans = vec![(spans.source.start, spans.source.end)];
            if internal {
                train_spans.push((spans.knowledge.start, spans.knowledge.end));
            }
            train_spans.push((spans.answer.start, spans.answer.end));
            SftRecord {
                text,
                train_spans,
                preferred: t.preferred.clone(),
            }
        })
        .collect()
}

/// Preference pairs over verbalizations, for internal-preferred tuples with
/// distinct best and worst contexts.
pub fn emit_dpo_records(tuples: &[TrainingTuple], registry: &SourceRegistry, beta: f64) -> Vec<DpoRecord> {
    tuples
        .iter()
        .filter(|t| registry.is_internal_token(&t.preferred))
        .filter(|t| t.c_i_plus().text != t.c_i_minus().text)
        .map(|t| DpoRecord {
            prompt: format!("{} ", assemble_prompt(&t.question, Some(&t.preferred), None, false)),
            chosen: format!("{} {EOK}", t.c_i_plus().text.trim()),
            rejected: format!("{} {EOK}", t.c_i_minus().text.trim()),
            beta,
        })
        .collect()
}

/// Writes both files; returns (sft count, dpo count).
pub fn write_training_files(
    tuples: &[TrainingTuple],
    registry: &SourceRegistry,
    lambda: f64,
    seed: u64,
    heuristic: LabelingHeuristic,
    sft_path: &Path,
    dpo_path: &Path,
) -> Result<(usize, usize), DataError> {
    let header = FileHeader {
        format_version: FORMAT_VERSION,
        seed,
        lambda,
        heuristic,
    };
    let sft = emit_sft_records(tuples, registry, lambda, seed);
    let dpo = emit_dpo_records(tuples, registry, DEFAULT_DPO_BETA);
    write_jsonl(sft_path, Some(&header), &sft)?;
    write_jsonl(dpo_path, Some(&header), &dpo)?;
    Ok((sft.len(), dpo.len()))
}
