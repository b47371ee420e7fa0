//! Knowledge-source registry and gateway configuration.
//!
//! The registry order is load-bearing: a source's position is the label
//! stored in the policy datastore, so it must survive save/load unchanged.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendsConfig;

pub const DEFAULT_K_NEIGHBORS: usize = 30;
pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_VERBALIZATION_MAX_TOKENS: usize = 150;
pub const DEFAULT_POISSON_LAMBDA: f64 = 2.0;
pub const DEFAULT_N_CONTEXTS: usize = 5;
pub const DEFAULT_ANSWER_MAX_TOKENS: usize = 256;
pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_EOS_TOKEN: &str = "</s>";

/// Env var consulted when `--config` is not given.
pub const CONFIG_ENV: &str = "SRRAG_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub token: String,
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default = "default_n_contexts")]
    pub n_contexts: usize,
}

fn default_n_contexts() -> usize {
    DEFAULT_N_CONTEXTS
}

impl SourceSpec {
    pub fn internal(token: &str) -> Self {
        SourceSpec {
            token: token.to_string(),
            kind: SourceKind::Internal,
            backend_id: None,
            n_contexts: DEFAULT_N_CONTEXTS,
        }
    }

    pub fn external(token: &str, backend_id: &str) -> Self {
        SourceSpec {
            token: token.to_string(),
            kind: SourceKind::External,
            backend_id: Some(backend_id.to_string()),
            n_contexts: DEFAULT_N_CONTEXTS,
        }
    }

    pub fn is_internal(&self) -> bool {
        self.kind == SourceKind::Internal
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("source token {0:?} must be non-empty and wrapped in angle brackets")]
    InvalidToken(String),
    #[error("duplicate source token {0}")]
    DuplicateToken(String),
    #[error("registry has no internal source")]
    NoInternalSource,
    #[error("registry has more than one internal source ({0})")]
    MultipleInternalSources(String),
    #[error("registry has no external source")]
    NoExternalSource,
    #[error("external source {0} has no backend_id")]
    ExternalWithoutBackend(String),
    #[error("internal source {0} must not name a backend_id")]
    InternalWithBackend(String),
    #[error("source {0} has n_contexts = 0")]
    ZeroContexts(String),
    #[error("registry has {0} sources; labels are 16-bit")]
    TooManySources(usize),
}

/// Checks every registry invariant in order and reports the first violation.
pub fn validate_registry(sources: &[SourceSpec]) -> Result<usize, RegistryError> {
    if sources.len() > u16::MAX as usize {
        return Err(RegistryError::TooManySources(sources.len()));
    }
    let mut internal = None;
    let mut any_external = false;
    for (i, s) in sources.iter().enumerate() {
        if !is_well_formed_token(&s.token) {
            return Err(RegistryError::InvalidToken(s.token.clone()));
        }
        if sources[..i].iter().any(|p| p.token == s.token) {
            return Err(RegistryError::DuplicateToken(s.token.clone()));
        }
        match s.kind {
            SourceKind::Internal => {
                if s.backend_id.is_some() {
                    return Err(RegistryError::InternalWithBackend(s.token.clone()));
                }
                if internal.is_some() {
                    return Err(RegistryError::MultipleInternalSources(s.token.clone()));
                }
                internal = Some(i);
            }
            SourceKind::External => {
                if s.backend_id.as_deref().is_none_or(str::is_empty) {
                    return Err(RegistryError::ExternalWithoutBackend(s.token.clone()));
                }
                any_external = true;
            }
        }
        if s.n_contexts == 0 {
            return Err(RegistryError::ZeroContexts(s.token.clone()));
        }
    }
    let internal = internal.ok_or(RegistryError::NoInternalSource)?;
    if !any_external {
        return Err(RegistryError::NoExternalSource);
    }
    Ok(internal)
}

fn is_well_formed_token(token: &str) -> bool {
    token.len() > 2
        && token.starts_with('<')
        && token.ends_with('>')
        && !token[1..token.len() - 1].contains(['<', '>'])
        && !token.chars().any(char::is_whitespace)
}

/// Validated, ordered set of knowledge sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceRegistry {
    sources: Vec<SourceSpec>,
    internal_index: usize,
}

impl SourceRegistry {
    pub fn new(sources: Vec<SourceSpec>) -> Result<Self, RegistryError> {
        let internal_index = validate_registry(&sources)?;
        Ok(SourceRegistry {
            sources,
            internal_index,
        })
    }

    /// `<Self>` internal plus `<Wiki>` backed by `wiki`.
    pub fn two_source() -> Self {
        Self::new(vec![
            SourceSpec::internal("<Self>"),
            SourceSpec::external("<Wiki>", "wiki"),
        ])
        .expect("static registry is valid")
    }

    /// `<Self>`, `<Wiki>` and `<Pubmed>`.
    pub fn three_source() -> Self {
        Self::new(vec![
            SourceSpec::internal("<Self>"),
            SourceSpec::external("<Wiki>", "wiki"),
            SourceSpec::external("<Pubmed>", "pubmed"),
        ])
        .expect("static registry is valid")
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn internal_index(&self) -> usize {
        self.internal_index
    }

    pub fn internal(&self) -> &SourceSpec {
        &self.sources[self.internal_index]
    }

    pub fn internal_token(&self) -> &str {
        &self.internal().token
    }

    pub fn get(&self, index: usize) -> Option<&SourceSpec> {
        self.sources.get(index)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.sources.iter().position(|s| s.token == token)
    }

    pub fn spec(&self, token: &str) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.token == token)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index_of(token).is_some()
    }

    pub fn is_internal_token(&self, token: &str) -> bool {
        self.internal_token() == token
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> + '_ {
        self.sources.iter().map(|s| s.token.as_str())
    }

    pub fn token_list(&self) -> Vec<String> {
        self.tokens().map(str::to_string).collect()
    }

    /// External sources with their registry index, in registry order.
    pub fn externals(&self) -> impl Iterator<Item = (usize, &SourceSpec)> + '_ {
        self.sources
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == SourceKind::External)
    }
}

impl Serialize for SourceRegistry {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.sources.serialize(serializer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingHeuristic {
    #[default]
    Top50Rank,
    BestSingle,
    BestAverage,
    BestAllRank,
}

impl std::str::FromStr for LabelingHeuristic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "top50_rank" => Ok(Self::Top50Rank),
            "best_single" => Ok(Self::BestSingle),
            "best_average" => Ok(Self::BestAverage),
            "best_all_rank" => Ok(Self::BestAllRank),
            other => Err(format!(
                "unknown heuristic {other:?} (expected top50_rank, best_single, best_average, best_all_rank)"
            )),
        }
    }
}

impl std::fmt::Display for LabelingHeuristic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Top50Rank => "top50_rank",
            Self::BestSingle => "best_single",
            Self::BestAverage => "best_average",
            Self::BestAllRank => "best_all_rank",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub registry: SourceRegistry,
    pub k_neighbors: usize,
    pub tau: f64,
    pub verbalization_max_tokens: usize,
    pub poisson_lambda: f64,
    pub labeling_heuristic: LabelingHeuristic,
    pub embedding_dim: usize,
    pub rng_seed: u64,
    pub answer_max_tokens: usize,
    pub eos_token: String,
    pub backends: Option<BackendsConfig>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid registry: {0}")]
    Validation(#[from] RegistryError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// On-disk shape of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    registry: Vec<SourceSpec>,
    #[serde(default = "d_k")]
    k_neighbors: usize,
    #[serde(default = "d_tau")]
    tau: f64,
    #[serde(default = "d_verb")]
    verbalization_max_tokens: usize,
    #[serde(default = "d_lambda")]
    poisson_lambda: f64,
    #[serde(default)]
    labeling_heuristic: LabelingHeuristic,
    #[serde(default = "d_dim")]
    embedding_dim: usize,
    #[serde(default)]
    rng_seed: u64,
    #[serde(default = "d_answer")]
    answer_max_tokens: usize,
    #[serde(default = "d_eos")]
    eos_token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backends: Option<BackendsConfig>,
}

fn d_k() -> usize {
    DEFAULT_K_NEIGHBORS
}
fn d_tau() -> f64 {
    DEFAULT_TAU
}
fn d_verb() -> usize {
    DEFAULT_VERBALIZATION_MAX_TOKENS
}
fn d_lambda() -> f64 {
    DEFAULT_POISSON_LAMBDA
}
fn d_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}
fn d_answer() -> usize {
    DEFAULT_ANSWER_MAX_TOKENS
}
fn d_eos() -> String {
    DEFAULT_EOS_TOKEN.to_string()
}

impl GatewayConfig {
    /// Defaults for everything except the registry.
    pub fn with_registry(registry: SourceRegistry) -> Self {
        GatewayConfig {
            registry,
            k_neighbors: DEFAULT_K_NEIGHBORS,
            tau: DEFAULT_TAU,
            verbalization_max_tokens: DEFAULT_VERBALIZATION_MAX_TOKENS,
            poisson_lambda: DEFAULT_POISSON_LAMBDA,
            labeling_heuristic: LabelingHeuristic::default(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            rng_seed: 0,
            answer_max_tokens: DEFAULT_ANSWER_MAX_TOKENS,
            eos_token: DEFAULT_EOS_TOKEN.to_string(),
            backends: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_registry(self.registry.sources())?;
        if self.k_neighbors == 0 {
            return Err(ConfigError::Invalid("k_neighbors must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ConfigError::Invalid(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.embedding_dim == 0 {
            return Err(ConfigError::Invalid("embedding_dim must be >= 1".into()));
        }
        if self.verbalization_max_tokens == 0 || self.answer_max_tokens == 0 {
            return Err(ConfigError::Invalid("token caps must be >= 1".into()));
        }
        if !(self.poisson_lambda >= 0.0 && self.poisson_lambda.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "poisson_lambda must be a finite non-negative number, got {}",
                self.poisson_lambda
            )));
        }
        if self.eos_token.is_empty() {
            return Err(ConfigError::Invalid("eos_token must be non-empty".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        if text.trim().is_empty() {
            return Err(ConfigError::Parse("config file is empty".into()));
        }
        let file: ConfigFile = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let registry = SourceRegistry::new(file.registry)?;
        let config = GatewayConfig {
            registry,
            k_neighbors: file.k_neighbors,
            tau: file.tau,
            verbalization_max_tokens: file.verbalization_max_tokens,
            poisson_lambda: file.poisson_lambda,
            labeling_heuristic: file.labeling_heuristic,
            embedding_dim: file.embedding_dim,
            rng_seed: file.rng_seed,
            answer_max_tokens: file.answer_max_tokens,
            eos_token: file.eos_token,
            backends: file.backends,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_string(&self) -> String {
        let file = ConfigFile {
            registry: self.registry.sources().to_vec(),
            k_neighbors: self.k_neighbors,
            tau: self.tau,
            verbalization_max_tokens: self.verbalization_max_tokens,
            poisson_lambda: self.poisson_lambda,
            labeling_heuristic: self.labeling_heuristic,
            embedding_dim: self.embedding_dim,
            rng_seed: self.rng_seed,
            answer_max_tokens: self.answer_max_tokens,
            eos_token: self.eos_token.clone(),
            backends: self.backends.clone(),
        };
        serde_json::to_string_pretty(&file).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_json_string()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn load_config(path: &Path) -> Result<GatewayConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    GatewayConfig::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_registry_is_valid() {
        let r = vec![
            SourceSpec::internal("<Self>"),
            SourceSpec::external("<Wiki>", "wiki-be"),
        ];
        assert_eq!(validate_registry(&r), Ok(0));
    }

    #[test]
    fn duplicate_token_rejected() {
        let r = vec![SourceSpec::internal("<Self>"), SourceSpec::internal("<Self>")];
        assert_eq!(
            validate_registry(&r),
            Err(RegistryError::DuplicateToken("<Self>".into()))
        );
    }

    #[test]
    fn external_only_has_no_internal() {
        let r = vec![SourceSpec::external("<Wiki>", "wiki")];
        assert_eq!(validate_registry(&r), Err(RegistryError::NoInternalSource));
    }

    #[test]
    fn structural_violations() {
        let two_internal = vec![
            SourceSpec::internal("<Self>"),
            SourceSpec::internal("<Self2>"),
            SourceSpec::external("<Wiki>", "w"),
        ];
        assert!(matches!(
            validate_registry(&two_internal),
            Err(RegistryError::MultipleInternalSources(_))
        ));

        let mut no_backend = SourceSpec::external("<Wiki>", "w");
        no_backend.backend_id = None;
        assert_eq!(
            validate_registry(&[SourceSpec::internal("<Self>"), no_backend]),
            Err(RegistryError::ExternalWithoutBackend("<Wiki>".into()))
        );

        assert_eq!(
            validate_registry(&[SourceSpec::internal("<Self>")]),
            Err(RegistryError::NoExternalSource)
        );
        for bad in ["", "Wiki", "<>", "<Wi ki>", "<<Wiki>"] {
            assert!(
                matches!(
                    validate_registry(&[SourceSpec::internal(bad)]),
                    Err(RegistryError::InvalidToken(_))
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn validate_is_pure() {
        let r = vec![SourceSpec::internal("<Self>"), SourceSpec::internal("<Self>")];
        assert_eq!(validate_registry(&r), validate_registry(&r));
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = GatewayConfig::from_json_str(
            r#"{"registry": [
                {"token": "<Self>", "kind": "internal"},
                {"token": "<Wiki>", "kind": "external", "backend_id": "wiki"}
            ]}"#,
        )
        .unwrap();
        assert_eq!(cfg.k_neighbors, 30);
        assert_eq!(cfg.poisson_lambda, 2.0);
        assert_eq!(cfg.tau, 0.2);
        assert_eq!(cfg.verbalization_max_tokens, 150);
        assert_eq!(cfg.registry.internal_token(), "<Self>");
        assert_eq!(cfg.registry.sources()[1].n_contexts, 5);
    }

    #[test]
    fn tau_override_and_errors() {
        let cfg = GatewayConfig::from_json_str(
            r#"{"registry": [
                {"token": "<Self>", "kind": "internal"},
                {"token": "<Wiki>", "kind": "external", "backend_id": "wiki"}
            ], "tau": 0.1}"#,
        )
        .unwrap();
        assert_eq!(cfg.tau, 0.1);

        assert!(matches!(GatewayConfig::from_json_str(""), Err(ConfigError::Parse(_))));
        assert!(matches!(
            GatewayConfig::from_json_str(r#"{"registry": [], "bogus": 1}"#),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            GatewayConfig::from_json_str(
                r#"{"registry": [{"token": "<Wiki>", "kind": "external", "backend_id": "w"}]}"#
            ),
            Err(ConfigError::Validation(RegistryError::NoInternalSource))
        ));
        assert!(matches!(
            GatewayConfig::from_json_str(
                r#"{"registry": [{"token": "<Self>", "kind": "internal"}, {"token": "<Wiki>", "kind": "external", "backend_id": "w"}], "tau": 1.5}"#
            ),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn save_load_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut cfg = GatewayConfig::with_registry(
            SourceRegistry::new(vec![
                SourceSpec::external("<Pubmed>", "pubmed"),
                SourceSpec::internal("<Self>"),
                SourceSpec::external("<Wiki>", "wiki"),
            ])
            .unwrap(),
        );
        cfg.tau = 0.1;
        cfg.save(&path).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.registry.internal_index(), 1);
    }
}
