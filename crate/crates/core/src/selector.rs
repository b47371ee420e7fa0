//! Source selection from the model's source-token probability and the
//! neighbor label distribution.
//!
//! The combined score of a source is `p_m * p_d`. With one external source
//! the rule is a plain threshold on its combined score. With several, the
//! best-scoring external source (lowest registry index on ties) is chosen
//! if it clears the threshold; otherwise the internal source is used.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::SourceDist;
use crate::registry::SourceRegistry;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectorError {
    #[error("score maps disagree on source token {0}")]
    KeyMismatch(String),
    #[error("probability for {token} is {value}, outside [0, 1]")]
    OutOfRange { token: String, value: f64 },
    #[error("threshold {0} is not a number")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingScores {
    pub p_m: SourceDist,
    pub p_d: SourceDist,
    pub combined: SourceDist,
    pub tau: f64,
    pub selected: String,
}

fn check_unit(dist: &SourceDist) -> Result<(), SelectorError> {
    for (token, &value) in dist {
        if !(0.0..=1.0).contains(&value) {
            return Err(SelectorError::OutOfRange {
                token: token.clone(),
                value,
            });
        }
    }
    Ok(())
}

/// Elementwise product over identical key sets; keeps `p_m`'s order.
pub fn combined_scores(p_m: &SourceDist, p_d: &SourceDist) -> Result<SourceDist, SelectorError> {
    if let Some(t) = p_m
        .keys()
        .find(|t| !p_d.contains_key(*t))
        .or_else(|| p_d.keys().find(|t| !p_m.contains_key(*t)))
    {
        return Err(SelectorError::KeyMismatch(t.clone()));
    }
    check_unit(p_m)?;
    check_unit(p_d)?;
    Ok(p_m.iter().map(|(t, m)| (t.clone(), m * p_d[t])).collect())
}

pub fn decide(scores: &SourceDist, registry: &SourceRegistry, tau: f64) -> Result<String, SelectorError> {
    if tau.is_nan() {
        return Err(SelectorError::BadThreshold(tau));
    }
    if let Some(t) = registry.tokens().find(|t| !scores.contains_key(*t)) {
        return Err(SelectorError::KeyMismatch(t.to_string()));
    }
    if let Some(t) = scores.keys().find(|t| !registry.contains(t)) {
        return Err(SelectorError::KeyMismatch(t.clone()));
    }
    let mut best: Option<(&str, f64)> = None;
    for (_, spec) in registry.externals() {
        let s = scores[&spec.token];
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((&spec.token, s));
        }
    }
    Ok(match best {
        Some((token, score)) if score >= tau => token.to_string(),
        _ => registry.internal_token().to_string(),
    })
}

/// Full routing record for one query.
pub fn route(
    p_m: SourceDist,
    p_d: SourceDist,
    registry: &SourceRegistry,
    tau: f64,
) -> Result<RoutingScores, SelectorError> {
    let combined = combined_scores(&p_m, &p_d)?;
    let selected = decide(&combined, registry, tau)?;
    Ok(RoutingScores {
        p_m,
        p_d,
        combined,
        tau,
        selected,
    })
}
