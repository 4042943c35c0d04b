//! Prefix-constrained beam search over a pluggable token scorer.
//!
//! Every beam item is a node of the [`PrefixTrie`], so decoding cannot leave
//! the vocabulary. At each step every live item is extended by all of its
//! allowed steps (child tokens plus end-of-entity when the node is terminal),
//! the extensions are ranked by cumulative log-score, and the best `width`
//! survive. A surviving end-of-entity extension is banked as a completed
//! candidate and leaves the beam.
//!
//! A single pass may bank fewer entities than requested. Further passes restart
//! from the root with already banked entities masked out, and subtrees with no
//! remaining admissible entity are pruned, so each pass banks at least one new
//! entity.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityId, Query, Vocabulary};
use crate::scalar::Scalar;
use crate::trie::{NodeId, PrefixTrie};

/// Default cap on path steps for [`exhaustive_decode`].
pub const DEFAULT_ORACLE_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    ZeroWidth,
    #[error("num_candidates must be at least 1")]
    ZeroCandidates,
    #[error("scorer failed at prefix {prefix:?}: {message}")]
    Scorer { prefix: Vec<String>, message: String },
    #[error("exhaustive decoding refused: {steps} path steps exceed the cap of {cap}")]
    OracleRefused { steps: usize, cap: usize },
}

/// One possible next step after a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step<'a> {
    /// End-of-entity; sorts before every token.
    End,
    Token(&'a str),
}

#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct ScorerError(pub String);

/// Assigns a log-score to every allowed next step.
///
/// Implementations must return exactly one finite score per entry of `allowed`,
/// in the same order.
pub trait TokenScorer<F: Scalar> {
    fn score(&self, query: &Query, prefix: &[&str], allowed: &[Step<'_>]) -> Result<Vec<F>, ScorerError>;

    fn is_stochastic(&self) -> bool {
        false
    }
}

impl<F: Scalar, S: TokenScorer<F> + ?Sized> TokenScorer<F> for &S {
    fn score(&self, query: &Query, prefix: &[&str], allowed: &[Step<'_>]) -> Result<Vec<F>, ScorerError> {
        (**self).score(query, prefix, allowed)
    }

    fn is_stochastic(&self) -> bool {
        (**self).is_stochastic()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<F> {
    pub id: EntityId,
    /// Sum of step log-scores along the token path plus the end-of-entity score.
    pub score: F,
}

/// Completed candidates, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet<F> {
    pub query_id: String,
    pub entities: Vec<Candidate<F>>,
    /// Set when `num_candidates` exceeded the admissible vocabulary.
    #[serde(default)]
    pub clamped: bool,
}

impl<F: Scalar> CandidateSet<F> {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &EntityId> {
        self.entities.iter().map(|c| &c.id)
    }

    pub fn score_of(&self, id: &EntityId) -> Option<F> {
        self.entities.iter().find(|c| &c.id == id).map(|c| c.score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub width: usize,
    pub num_candidates: usize,
    /// Admit seed entities as candidates (ablation only).
    #[serde(default)]
    pub include_seeds: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            width: 5,
            num_candidates: 100,
            include_seeds: false,
        }
    }
}

/// Order on candidates: score descending, then entity id ascending.
pub fn candidate_order<F: Scalar>(a: &Candidate<F>, b: &Candidate<F>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

/// Per-node count of admissible terminals below (and at) each node.
struct Liveness<'t> {
    trie: &'t PrefixTrie,
    live: Vec<u32>,
    admissible_terminal: Vec<bool>,
}

impl<'t> Liveness<'t> {
    fn new(trie: &'t PrefixTrie, excluded: &HashSet<&EntityId>) -> Self {
        let mut live = vec![0u32; trie.node_count()];
        let mut admissible_terminal = vec![false; trie.node_count()];
        for node in trie.post_order() {
            let own = match trie.terminal(node) {
                Some(id) if !excluded.contains(id) => {
                    admissible_terminal[node.index()] = true;
                    1
                }
                _ => 0,
            };
            let below: u32 = trie.children(node).map(|(_, c)| live[c.index()]).sum();
            live[node.index()] = own + below;
        }
        Self {
            trie,
            live,
            admissible_terminal,
        }
    }

    fn remaining(&self) -> usize {
        self.live[NodeId::ROOT.index()] as usize
    }

    fn allowed(&self, node: NodeId) -> Vec<(Step<'t>, Option<NodeId>)> {
        let mut steps = Vec::new();
        if self.admissible_terminal[node.index()] {
            steps.push((Step::End, None));
        }
        for (token, child) in self.trie.children(node) {
            if self.live[child.index()] > 0 {
                steps.push((Step::Token(token), Some(child)));
            }
        }
        steps
    }

    fn retire(&mut self, terminal: NodeId) {
        self.admissible_terminal[terminal.index()] = false;
        let mut cursor = Some(terminal);
        while let Some(node) = cursor {
            self.live[node.index()] -= 1;
            cursor = self.trie.parent(node);
        }
    }
}

fn score_steps<F: Scalar, S: TokenScorer<F> + ?Sized>(
    scorer: &S,
    query: &Query,
    prefix: &[&str],
    allowed: &[Step<'_>],
) -> Result<Vec<F>, DecodeError> {
    let fail = |message: String| DecodeError::Scorer {
        prefix: prefix.iter().map(|t| t.to_string()).collect(),
        message,
    };
    let scores = scorer.score(query, prefix, allowed).map_err(|e| fail(e.0))?;
    if scores.len() != allowed.len() {
        return Err(fail(format!(
            "returned {} scores for {} allowed steps",
            scores.len(),
            allowed.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(fail(format!("non-finite score {bad}")));
    }
    Ok(scores)
}

fn excluded_ids(query: &Query, include_seeds: bool) -> HashSet<&EntityId> {
    if include_seeds {
        HashSet::new()
    } else {
        query.seeds.iter().collect()
    }
}

#[derive(Clone)]
struct BeamItem<'t, F> {
    node: NodeId,
    tokens: Vec<&'t str>,
    score: F,
}

struct Extension<'t, F> {
    parent: usize,
    step: Step<'t>,
    child: Option<NodeId>,
    score: F,
}

/// Runs prefix-constrained beam search and returns the best
/// `min(num_candidates, admissible entities)` completed candidates.
pub fn decode<F: Scalar, S: TokenScorer<F> + ?Sized>(
    query: &Query,
    trie: &PrefixTrie,
    scorer: &S,
    options: DecodeOptions,
) -> Result<CandidateSet<F>, DecodeError> {
    if options.width == 0 {
        return Err(DecodeError::ZeroWidth);
    }
    if options.num_candidates == 0 {
        return Err(DecodeError::ZeroCandidates);
    }
    let excluded = excluded_ids(query, options.include_seeds);
    let mut liveness = Liveness::new(trie, &excluded);
    let available = liveness.remaining();
    let target = options.num_candidates.min(available);
    let clamped = target < options.num_candidates;
    if clamped {
        warn!(
            "query {}: requested {} candidates but only {} are admissible; clamping",
            query.query_id, options.num_candidates, available
        );
    }

    let mut banked: Vec<Candidate<F>> = Vec::with_capacity(target);
    while banked.len() < target && liveness.remaining() > 0 {
        let before = banked.len();
        beam_pass(query, trie, scorer, options.width, &mut liveness, &mut banked)?;
        debug_assert!(banked.len() > before, "a pass must bank at least one entity");
        if banked.len() == before {
            break;
        }
    }
    banked.sort_by(candidate_order);
    banked.truncate(target);
    Ok(CandidateSet {
        query_id: query.query_id.clone(),
        entities: banked,
        clamped,
    })
}

fn beam_pass<'t, F: Scalar, S: TokenScorer<F> + ?Sized>(
    query: &Query,
    trie: &'t PrefixTrie,
    scorer: &S,
    width: usize,
    liveness: &mut Liveness<'t>,
    banked: &mut Vec<Candidate<F>>,
) -> Result<(), DecodeError> {
    let mut beam = vec![BeamItem {
        node: NodeId::ROOT,
        tokens: Vec::new(),
        score: F::zero(),
    }];
    while !beam.is_empty() {
        let mut extensions: Vec<Extension<'t, F>> = Vec::new();
        for (idx, item) in beam.iter().enumerate() {
            let allowed = liveness.allowed(item.node);
            if allowed.is_empty() {
                continue;
            }
            let steps: Vec<Step<'t>> = allowed.iter().map(|(s, _)| *s).collect();
            let scores = score_steps(scorer, query, &item.tokens, &steps)?;
            for ((step, child), s) in allowed.into_iter().zip(scores) {
                extensions.push(Extension {
                    parent: idx,
                    step,
                    child,
                    score: item.score + s,
                });
            }
        }
        // All items share a depth, so comparing parent token paths then the
        // step gives a total order on extensions.
        extensions.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| beam[a.parent].tokens.cmp(&beam[b.parent].tokens))
                .then_with(|| a.step.cmp(&b.step))
        });
        extensions.truncate(width);

        let mut next = Vec::with_capacity(extensions.len());
        for ext in extensions {
            let parent = &beam[ext.parent];
            match (ext.step, ext.child) {
                (Step::Token(token), Some(child)) => {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(token);
                    next.push(BeamItem {
                        node: child,
                        tokens,
                        score: ext.score,
                    });
                }
                _ => {
                    let id = trie.terminal(parent.node).expect("end step on terminal node");
                    banked.push(Candidate {
                        id: id.clone(),
                        score: ext.score,
                    });
                    liveness.retire(parent.node);
                }
            }
        }
        beam = next;
    }
    Ok(())
}

/// Sum over admissible entities of (token count + 1).
fn path_steps(trie: &PrefixTrie, liveness: &Liveness<'_>) -> usize {
    (0..trie.node_count())
        .map(NodeId)
        .filter(|n| liveness.admissible_terminal[n.index()])
        .map(|n| trie.depth(n) + 1)
        .sum()
}

/// Scores every admissible entity by full path evaluation.
///
/// Returns all of them sorted by score descending, ties by id ascending.
/// Seeds are excluded unless `include_seeds` is set, mirroring [`decode`].
pub fn exhaustive_decode<F: Scalar, S: TokenScorer<F> + ?Sized>(
    query: &Query,
    trie: &PrefixTrie,
    scorer: &S,
    cap: usize,
    include_seeds: bool,
) -> Result<CandidateSet<F>, DecodeError> {
    let excluded = excluded_ids(query, include_seeds);
    let liveness = Liveness::new(trie, &excluded);
    let steps = path_steps(trie, &liveness);
    if steps > cap {
        return Err(DecodeError::OracleRefused { steps, cap });
    }
    let mut out = Vec::new();
    let mut stack: Vec<(NodeId, Vec<&str>, F)> = vec![(NodeId::ROOT, Vec::new(), F::zero())];
    while let Some((node, tokens, score)) = stack.pop() {
        let allowed = liveness.allowed(node);
        if allowed.is_empty() {
            continue;
        }
        let step_list: Vec<Step<'_>> = allowed.iter().map(|(s, _)| *s).collect();
        let scores = score_steps(scorer, query, &tokens, &step_list)?;
        for ((step, child), s) in allowed.into_iter().zip(scores) {
            match (step, child) {
                (Step::Token(token), Some(child)) => {
                    let mut next = tokens.clone();
                    next.push(token);
                    stack.push((child, next, score + s));
                }
                _ => out.push(Candidate {
                    id: trie.terminal(node).expect("terminal").clone(),
                    score: score + s,
                }),
            }
        }
    }
    out.sort_by(candidate_order);
    Ok(CandidateSet {
        query_id: query.query_id.clone(),
        entities: out,
        clamped: false,
    })
}

/// Deterministic heuristic scorer: log-normalized weights that grow with a
/// token's vocabulary frequency and with overlap against the seed tokens.
#[derive(Debug, Clone)]
pub struct OverlapScorer {
    frequency: HashMap<String, u32>,
    tokens_by_id: HashMap<EntityId, Vec<String>>,
    overlap_boost: f64,
    end_weight: f64,
}

impl OverlapScorer {
    pub fn new(vocab: &Vocabulary) -> Self {
        let mut frequency = HashMap::new();
        let mut tokens_by_id = HashMap::new();
        for entity in vocab.entities() {
            for token in &entity.tokens {
                *frequency.entry(token.clone()).or_insert(0) += 1;
            }
            tokens_by_id.insert(entity.id.clone(), entity.tokens.clone());
        }
        Self {
            frequency,
            tokens_by_id,
            overlap_boost: 4.0,
            end_weight: 2.0,
        }
    }

    pub fn with_overlap_boost(mut self, boost: f64) -> Self {
        self.overlap_boost = boost;
        self
    }

    fn seed_tokens<'a>(&'a self, query: &Query) -> HashSet<&'a str> {
        query
            .seeds
            .iter()
            .filter_map(|id| self.tokens_by_id.get(id))
            .flatten()
            .map(String::as_str)
            .collect()
    }
}

impl<F: Scalar> TokenScorer<F> for OverlapScorer {
    fn score(&self, query: &Query, _prefix: &[&str], allowed: &[Step<'_>]) -> Result<Vec<F>, ScorerError> {
        let seed_tokens = self.seed_tokens(query);
        let weights: Vec<f64> = allowed
            .iter()
            .map(|step| match step {
                Step::End => self.end_weight,
                Step::Token(t) => {
                    let freq = f64::from(self.frequency.get(*t).copied().unwrap_or(0));
                    let boost = if seed_tokens.contains(t) {
                        1.0 + self.overlap_boost
                    } else {
                        1.0
                    };
                    (1.0 + freq.ln_1p()) * boost
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| F::of((w / total).ln())).collect())
    }
}

/// Pseudo-random but deterministic scorer keyed by (salt, prefix, step).
/// Scores are independent of the rest of the allowed set.
#[derive(Debug, Clone, Copy)]
pub struct SeededScorer {
    pub salt: u64,
}

impl SeededScorer {
    pub fn new(salt: u64) -> Self {
        Self { salt }
    }

    fn unit(&self, prefix: &[&str], step: &Step<'_>) -> f64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.salt.hash(&mut hasher);
        prefix.hash(&mut hasher);
        step.hash(&mut hasher);
        (hasher.finish() >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl<F: Scalar> TokenScorer<F> for SeededScorer {
    fn score(&self, _query: &Query, prefix: &[&str], allowed: &[Step<'_>]) -> Result<Vec<F>, ScorerError> {
        Ok(allowed
            .iter()
            .map(|step| F::of(-5.0 * self.unit(prefix, step) - 1e-3))
            .collect())
    }
}
