//! Listwise rankers: turn a [`SampleList`] into a [`RankedList`].

pub mod chat;
pub mod parse;
pub mod prompt;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Entity, EntityId, Query};
use crate::sampler::SampleList;

pub use chat::{ChatConfig, ChatRanker, ChatTransport, HttpTransport, TransportError};
pub use parse::{parse_response, ParseFailure, ParsedRanking};
pub use prompt::{render_prompt, PromptDocument, PromptPart};

#[derive(Debug, Error)]
pub enum RankError {
    #[error("cannot rank an empty list")]
    EmptyList,
    #[error("query `{0}` has no ground truth; oracle rankers need it")]
    MissingGroundTruth(String),
    #[error("ranker configuration: {0}")]
    Config(String),
    #[error("list `{0}` has no transcript to replay")]
    MissingTranscript(String),
}

/// Ranker output: positions[i] holds the entity at rank i + 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub list_id: String,
    pub positions: Vec<EntityId>,
}

impl RankedList {
    /// True when `positions` is a permutation of `members`.
    pub fn is_permutation_of(&self, members: &[EntityId]) -> bool {
        let mut a: Vec<&EntityId> = self.positions.iter().collect();
        let mut b: Vec<&EntityId> = members.iter().collect();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankerKind {
    PerfectOracle,
    NoisyOracle,
    RemoteChat,
}

impl std::fmt::Display for RankerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RankerKind::PerfectOracle => "perfect-oracle",
            RankerKind::NoisyOracle => "noisy-oracle",
            RankerKind::RemoteChat => "remote-chat",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RankerConfig {
    #[default]
    PerfectOracle,
    NoisyOracle {
        /// Per adjacent pair swap probability, in [0, 1].
        tau: f64,
        #[serde(default)]
        seed: u64,
    },
    RemoteChat(ChatConfig),
}

impl RankerConfig {
    pub fn kind(&self) -> RankerKind {
        match self {
            RankerConfig::PerfectOracle => RankerKind::PerfectOracle,
            RankerConfig::NoisyOracle { .. } => RankerKind::NoisyOracle,
            RankerConfig::RemoteChat(_) => RankerKind::RemoteChat,
        }
    }

    pub fn validate(&self) -> Result<(), RankError> {
        match self {
            RankerConfig::NoisyOracle { tau, .. } if !(0.0..=1.0).contains(tau) => {
                Err(RankError::Config(format!("tau must lie in [0, 1], got {tau}")))
            }
            RankerConfig::RemoteChat(c) if c.timeout_secs.is_nan() || c.timeout_secs <= 0.0 => {
                Err(RankError::Config("timeout must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

pub fn build_ranker(config: &RankerConfig) -> Result<Box<dyn Ranker>, RankError> {
    config.validate()?;
    Ok(match config {
        RankerConfig::PerfectOracle => Box::new(PerfectOracle),
        RankerConfig::NoisyOracle { tau, seed } => Box::new(NoisyOracle::new(*tau, *seed)),
        RankerConfig::RemoteChat(c) => Box::new(ChatRanker::http(c.clone())?),
    })
}

/// Everything a ranker may look at for one list.
#[derive(Debug, Clone)]
pub struct RankRequest<'a> {
    pub query: &'a Query,
    pub seeds: Vec<&'a Entity>,
    pub list: &'a SampleList,
    /// Resolved `list.members`, same order.
    pub members: Vec<&'a Entity>,
}

/// A ranking plus the transcript material describing how it was produced.
#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub ranked: RankedList,
    /// Ranking fell back to presentation order.
    pub degraded: bool,
    pub repairs: usize,
    pub request: Value,
    pub response: Option<String>,
    pub error: Option<String>,
    pub latency_ms: u64,
}

pub trait Ranker: Send + Sync {
    fn kind(&self) -> RankerKind;

    /// Only configuration problems are errors; remote failures degrade.
    fn rank(&self, request: &RankRequest<'_>) -> Result<RankOutcome, RankError>;
}

/// Ground-truth members first (by ground-truth rank), then the rest by id.
fn oracle_order(request: &RankRequest<'_>) -> Result<Vec<EntityId>, RankError> {
    let truth = request
        .query
        .ground_truth
        .as_ref()
        .ok_or_else(|| RankError::MissingGroundTruth(request.query.query_id.clone()))?;
    let rank: HashMap<&EntityId, usize> = truth.iter().enumerate().map(|(i, id)| (id, i)).collect();
    let mut order = request.list.members.clone();
    order.sort_by(|a, b| {
        let ka = rank.get(a).copied().unwrap_or(usize::MAX);
        let kb = rank.get(b).copied().unwrap_or(usize::MAX);
        ka.cmp(&kb).then_with(|| a.cmp(b))
    });
    Ok(order)
}

fn oracle_outcome(request: &RankRequest<'_>, kind: RankerKind, positions: Vec<EntityId>) -> RankOutcome {
    let surface: HashMap<&EntityId, &str> = request.members.iter().map(|e| (&e.id, e.surface.as_str())).collect();
    let response = positions
        .iter()
        .map(|id| surface.get(id).copied().unwrap_or(id.as_str()))
        .collect::<Vec<_>>()
        .join(" > ");
    RankOutcome {
        ranked: RankedList {
            list_id: request.list.list_id.clone(),
            positions,
        },
        degraded: false,
        repairs: 0,
        request: json!({
            "ranker": kind.to_string(),
            "query_id": request.query.query_id,
            "members": request.list.members,
        }),
        response: Some(response),
        error: None,
        latency_ms: 0,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectOracle;

impl Ranker for PerfectOracle {
    fn kind(&self) -> RankerKind {
        RankerKind::PerfectOracle
    }

    fn rank(&self, request: &RankRequest<'_>) -> Result<RankOutcome, RankError> {
        let order = oracle_order(request)?;
        Ok(oracle_outcome(request, self.kind(), order))
    }
}

/// Perfect ranking perturbed by one left-to-right pass of adjacent
/// transpositions, each applied with probability `tau`. Every applied swap adds
/// exactly one inversion, so the expected Kendall distance is `tau * (n - 1)`.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracle {
    tau: f64,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(tau: f64, seed: u64) -> Self {
        Self { tau, seed }
    }

    fn rng_for(&self, list_id: &str) -> ChaCha8Rng {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(list_id.as_bytes())
            .finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    pub fn perturb<T>(&self, list_id: &str, items: &mut [T]) {
        let mut rng = self.rng_for(list_id);
        for i in 0..items.len().saturating_sub(1) {
            if rng.random_bool(self.tau) {
                items.swap(i, i + 1);
            }
        }
    }
}

impl Ranker for NoisyOracle {
    fn kind(&self) -> RankerKind {
        RankerKind::NoisyOracle
    }

    fn rank(&self, request: &RankRequest<'_>) -> Result<RankOutcome, RankError> {
        let mut order = oracle_order(request)?;
        self.perturb(&request.list.list_id, &mut order);
        Ok(oracle_outcome(request, self.kind(), order))
    }
}
