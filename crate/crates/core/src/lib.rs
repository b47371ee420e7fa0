//! Self-routing retrieval-augmented generation.
//!
//! Per query, the gateway decides whether to retrieve from an external
//! corpus or have the model verbalize its own knowledge, by thresholding
//! the product of the model's source-token probability and a kNN label
//! distribution over a policy datastore. The offline side builds labeled
//! training tuples, SFT/DPO training files, and the datastore itself.

pub mod backend;
pub mod cli;
pub mod data_builder;
pub mod datastore;
pub mod eval;
pub mod orchestrator;
pub mod prompt;
pub mod registry;
pub mod selector;
pub mod service;
pub mod training;

pub use backend::{BackendError, Backends, SourceDist};
pub use datastore::{PolicyDatastore, SharedDatastore};
pub use orchestrator::{AnswerOptions, AnswerResult, Gateway, GatewayError, LatencyBreakdown};
pub use registry::{GatewayConfig, SourceRegistry, SourceSpec};
pub use selector::RoutingScores;
