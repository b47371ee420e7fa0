//! Answer correctness, routing rates, decision quality and latency curves.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{AnswerResult, LatencyBreakdown};
use crate::registry::SourceRegistry;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("run has no records")]
    EmptyRun,
    #[error("record {0} has no gold answers")]
    EmptyGolds(String),
    #[error("decision {0} is not a registered source")]
    UnknownDecision(String),
    #[error("no record carries an oracle label")]
    NoOracleLabels,
    #[error("AUROC needs both classes; only one is present")]
    SingleClass,
    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("no paired outcomes")]
    EmptyPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Substring,
    ExactChoice,
}

impl std::str::FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "substring" => Ok(Self::Substring),
            "exact_choice" => Ok(Self::ExactChoice),
            other => Err(format!(
                "unknown match mode {other:?} (expected substring, exact_choice)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub prediction: String,
    pub golds: Vec<String>,
    pub decision: String,
    #[serde(default)]
    pub oracle_label: Option<String>,
    /// Combined score of the best external source.
    #[serde(default)]
    pub decision_score: f64,
    #[serde(default)]
    pub latency: LatencyBreakdown,
}

impl EvalRecord {
    pub fn from_answer(
        question_id: &str,
        result: &AnswerResult,
        golds: Vec<String>,
        registry: &SourceRegistry,
    ) -> Self {
        EvalRecord {
            question_id: question_id.to_string(),
            prediction: result.answer.clone(),
            golds,
            decision: result.knowledge_origin.clone(),
            oracle_label: None,
            decision_score: external_score(&result.decision.combined, registry),
            latency: result.latency,
        }
    }
}

/// Highest combined score among external sources.
pub fn external_score(combined: &IndexMap<String, f64>, registry: &SourceRegistry) -> f64 {
    registry
        .externals()
        .filter_map(|(_, s)| combined.get(&s.token).copied())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub accuracy: f64,
    pub rag_rate: IndexMap<String, f64>,
    pub decision_accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub auroc: Option<f64>,
    pub win_rate_verb_ge_rag: Option<f64>,
    pub mean_latency: LatencyBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionMetrics {
    pub decision_accuracy: f64,
    pub f1: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rag_rate: f64,
    pub accuracy: f64,
    pub mean_total_latency: f64,
}

/// Lowercase, whitespace-split, punctuation trimmed from both ends of each
/// token, empty tokens dropped, rejoined with single spaces.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// `substring`: some normalized gold occurs in the normalized prediction.
/// `exact_choice`: the normalized prediction, or its first token, equals a
/// normalized gold.
pub fn lexical_match(prediction: &str, golds: &[String], mode: MatchMode) -> bool {
    let pred = normalize_answer(prediction);
    let mut golds = golds.iter().map(|g| normalize_answer(g)).filter(|g| !g.is_empty());
    match mode {
        MatchMode::Substring => golds.any(|g| pred.contains(&g)),
        MatchMode::ExactChoice => {
            let first = pred.split(' ').next().unwrap_or_default();
            golds.any(|g| g == pred || g == first)
        }
    }
}

fn check(records: &[EvalRecord], registry: &SourceRegistry) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    for r in records {
        if r.golds.is_empty() {
            return Err(EvalError::EmptyGolds(r.question_id.clone()));
        }
        if !registry.contains(&r.decision) {
            return Err(EvalError::UnknownDecision(r.decision.clone()));
        }
        if let Some(o) = &r.oracle_label {
            if !registry.contains(o) {
                return Err(EvalError::UnknownDecision(o.clone()));
            }
        }
    }
    Ok(())
}

fn mean_latency(records: &[EvalRecord]) -> LatencyBreakdown {
    let n = records.len() as f64;
    let avg = |f: fn(&LatencyBreakdown) -> f64| records.iter().map(|r| f(&r.latency)).sum::<f64>() / n;
    LatencyBreakdown {
        t_d: avg(|l| l.t_d),
        t_rs: avg(|l| l.t_rs),
        t_v: avg(|l| l.t_v),
        t_g: avg(|l| l.t_g),
        total: avg(|l| l.total),
    }
}

pub fn evaluate_run(
    records: &[EvalRecord],
    registry: &SourceRegistry,
    mode: MatchMode,
) -> Result<EvalSummary, EvalError> {
    check(records, registry)?;
    let n = records.len() as f64;
    let correct = records
        .iter()
        .filter(|r| lexical_match(&r.prediction, &r.golds, mode))
        .count();
    let rag_rate = registry
        .tokens()
        .map(|t| {
            (
                t.to_string(),
                records.iter().filter(|r| r.decision == t).count() as f64 / n,
            )
        })
        .collect();
    let labeled: Vec<&EvalRecord> = records.iter().filter(|r| r.oracle_label.is_some()).collect();
    let (decision_accuracy, f1) = if labeled.is_empty() {
        (None, None)
    } else {
        let (a, f) = accuracy_f1(&labeled, registry);
        (Some(a), Some(f))
    };
    Ok(EvalSummary {
        count: records.len(),
        accuracy: correct as f64 / n,
        rag_rate,
        decision_accuracy,
        f1,
        auroc: auroc_of(&labeled, registry).ok(),
        win_rate_verb_ge_rag: None,
        mean_latency: mean_latency(records),
    })
}

/// Decision accuracy and F1 with the internal source as positive class.
fn accuracy_f1(labeled: &[&EvalRecord], registry: &SourceRegistry) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg, mut agree) = (0usize, 0usize, 0usize, 0usize);
    for r in labeled {
        let oracle = r.oracle_label.as_deref().expect("labeled");
        agree += usize::from(r.decision == oracle);
        match (
            registry.is_internal_token(&r.decision),
            registry.is_internal_token(oracle),
        ) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let f1 = if tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    (agree as f64 / labeled.len() as f64, f1)
}

fn auroc_of(labeled: &[&EvalRecord], registry: &SourceRegistry) -> Result<f64, EvalError> {
    let scores: Vec<f64> = labeled.iter().map(|r| r.decision_score).collect();
    let positive: Vec<bool> = labeled
        .iter()
        .map(|r| !registry.is_internal_token(r.oracle_label.as_deref().expect("labeled")))
        .collect();
    auroc(&scores, &positive)
}

/// Mann-Whitney AUROC via midranks; tied pairs count one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Accuracy, F1 and AUROC over records carrying an oracle label.
pub fn decision_metrics(records: &[EvalRecord], registry: &SourceRegistry) -> Result<DecisionMetrics, EvalError> {
    check(records, registry)?;
    let labeled: Vec<&EvalRecord> = records.iter().filter(|r| r.oracle_label.is_some()).collect();
    if labeled.is_empty() {
        return Err(EvalError::NoOracleLabels);
    }
    let auroc = auroc_of(&labeled, registry)?;
    let (decision_accuracy, f1) = accuracy_f1(&labeled, registry);
    Ok(DecisionMetrics {
        decision_accuracy,
        f1,
        auroc,
    })
}

/// Fraction of items where verbalization is at least as correct as
/// retrieval.
pub fn paired_win_rate(pairs: &[(bool, bool)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    Ok(pairs.iter().filter(|(v, r)| v >= r).count() as f64 / pairs.len() as f64)
}

/// One point per group, sorted by the group's external-routing rate.
pub fn latency_curve(
    groups: &[Vec<EvalRecord>],
    registry: &SourceRegistry,
    mode: MatchMode,
) -> Result<Vec<CurvePoint>, EvalError> {
    if groups.len() < 2 {
        return Err(EvalError::TooFewGroups(groups.len()));
    }
    let mut points = groups
        .iter()
        .map(|g| {
            let s = evaluate_run(g, registry, mode)?;
            Ok(CurvePoint {
                rag_rate: 1.0 - s.rag_rate[registry.internal_token()],
                accuracy: s.accuracy,
                mean_total_latency: s.mean_latency.total,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    points.sort_by(|a, b| a.rag_rate.total_cmp(&b.rag_rate));
    Ok(points)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("rag_rate,accuracy,mean_total_latency\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.rag_rate, p.accuracy, p.mean_total_latency));
    }
    out
}
