//! Entity set expansion: prefix-constrained candidate decoding over a closed
//! vocabulary, balanced list sampling, listwise re-ranking and position-sum
//! aggregation, plus the metrics used to evaluate it.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64` (the default everywhere) or `f32`.

pub mod aggregator;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod metrics;
pub mod pipeline;
pub mod ranker;
pub mod sampler;
pub mod scalar;
pub mod simulate;
pub mod transcript;
pub mod trie;

pub use corpus::{Entity, EntityId, Query, Vocabulary};
pub use scalar::Scalar;
pub use trie::PrefixTrie;

pub type Candidate = decoder::Candidate<f64>;
pub type CandidateSet = decoder::CandidateSet<f64>;
pub type RankedEntity = aggregator::RankedEntity<f64>;
pub type ExpansionResult = aggregator::ExpansionResult<f64>;
pub type MetricsReport = metrics::MetricsReport<f64>;
pub type QueryMetrics = metrics::QueryMetrics<f64>;

pub type CandidateSetF32 = decoder::CandidateSet<f32>;
pub type ExpansionResultF32 = aggregator::ExpansionResult<f32>;
pub type MetricsReportF32 = metrics::MetricsReport<f32>;
