#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::IndexedRandom;
use rand::Rng;
use setexp::config::RunConfig;
use setexp::corpus::{Entity, EntityId, Query, Vocabulary};
use setexp::ranker::{RankError, RankOutcome, RankRequest, Ranker, RankerKind};

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

/// Toy config writing runs below `out`.
pub fn toy_config(out: &std::path::Path) -> RunConfig {
    let mut config = RunConfig::default();
    config.paths.vocab = toy_dir().join("vocab.jsonl");
    config.paths.queries = toy_dir().join("queries.jsonl");
    config.paths.output_dir = out.to_path_buf();
    config
}

const WORDS: [&str; 8] = ["red", "blue", "cat", "dog", "new", "old", "sun", "sea"];

/// Random vocabulary of up to `max` entities with 1 to 4 tokens each.
pub fn random_vocab(rng: &mut impl Rng, max: usize) -> Vocabulary {
    let target = rng.random_range(4..=max);
    let mut seen = BTreeSet::new();
    let mut entities = Vec::new();
    for _ in 0..target * 4 {
        if entities.len() == target {
            break;
        }
        let len = rng.random_range(1..=4);
        let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
        let surface = words.join(" ");
        if seen.insert(surface.clone()) {
            entities.push(Entity::new(format!("e{:04}", entities.len()), surface).unwrap());
        }
    }
    Vocabulary::from_entities(entities).unwrap()
}

pub fn query_with_seeds(vocab: &Vocabulary, seeds: usize) -> Query {
    Query {
        query_id: "q".into(),
        seeds: vocab.entities().iter().take(seeds).map(|e| e.id.clone()).collect(),
        class_name: None,
        ground_truth: None,
    }
}

/// Perfect oracle that counts its invocations.
#[derive(Default)]
pub struct CountingOracle {
    pub calls: AtomicUsize,
}

impl CountingOracle {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Ranker for CountingOracle {
    fn kind(&self) -> RankerKind {
        RankerKind::PerfectOracle
    }

    fn rank(&self, request: &RankRequest<'_>) -> Result<RankOutcome, RankError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        setexp::ranker::PerfectOracle.rank(request)
    }
}

/// AP@K recomputed from scratch at every relevant cutoff.
pub fn brute_ap(ranked: &[EntityId], truth: &HashSet<EntityId>, k: usize) -> f64 {
    let top: Vec<&EntityId> = ranked.iter().take(k).collect();
    let mut sum = 0.0;
    for i in 1..=top.len() {
        if truth.contains(top[i - 1]) {
            let hits = top[..i].iter().filter(|e| truth.contains(**e)).count();
            sum += hits as f64 / i as f64;
        }
    }
    sum / k.min(truth.len()) as f64
}

pub fn brute_precision(ranked: &[EntityId], truth: &HashSet<EntityId>, k: usize) -> f64 {
    let hits = (0..k)
        .filter(|&i| ranked.get(i).is_some_and(|e| truth.contains(e)))
        .count();
    hits as f64 / k as f64
}

/// Kendall tau-a by direct pair enumeration over the items of `a`.
pub fn brute_kendall(a: &[EntityId], b: &[EntityId]) -> f64 {
    let pos = |xs: &[EntityId], x: &EntityId| xs.iter().position(|y| y == x).unwrap();
    let mut score = 0i64;
    let mut pairs = 0i64;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            pairs += 1;
            score += if pos(b, &a[i]) < pos(b, &a[j]) { 1 } else { -1 };
        }
    }
    score as f64 / pairs as f64
}
