//! Position-sum aggregation of ranked lists into a global ordering.
//!
//! Each time an entity is ranked at 1-based position `i` it gains `i`; lower
//! totals mean more relevant. The final order sorts by mean position, compared
//! exactly as a rational, so entities with an extra padded occurrence remain
//! comparable.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntityId;
use crate::decoder::CandidateSet;
use crate::ranker::{RankedList, RankerKind};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggregateError {
    #[error("list `{list}` ranks `{id}`, which is not a candidate")]
    UnknownEntity { list: String, id: EntityId },
    #[error("list `{0}` repeats an entity")]
    RepeatedEntity(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    /// Sum of 1-based positions.
    pub total: u64,
    pub occurrences: u64,
    /// Degraded lists that touched the entity.
    pub degraded: u64,
}

impl Tally {
    pub fn mean(&self) -> Option<Ratio<u64>> {
        (self.occurrences > 0).then(|| Ratio::new(self.total, self.occurrences))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradedPolicy {
    /// Degraded lists count with their fallback ranking.
    #[default]
    Include,
    /// Degraded lists are skipped.
    Exclude,
}

/// Accumulated scores for one query. Merging is commutative and associative.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoreTable {
    tallies: BTreeMap<EntityId, Tally>,
    lists: u64,
    degraded_lists: u64,
}

impl ScoreTable {
    pub fn new<'a>(candidates: impl IntoIterator<Item = &'a EntityId>) -> Self {
        Self {
            tallies: candidates
                .into_iter()
                .map(|id| (id.clone(), Tally::default()))
                .collect(),
            lists: 0,
            degraded_lists: 0,
        }
    }

    pub fn tally(&self, id: &EntityId) -> Option<&Tally> {
        self.tallies.get(id)
    }

    pub fn tallies(&self) -> &BTreeMap<EntityId, Tally> {
        &self.tallies
    }

    pub fn lists(&self) -> u64 {
        self.lists
    }

    pub fn degraded_lists(&self) -> u64 {
        self.degraded_lists
    }

    pub fn accumulate(
        &mut self,
        ranked: &RankedList,
        degraded: bool,
        policy: DegradedPolicy,
    ) -> Result<(), AggregateError> {
        for (i, id) in ranked.positions.iter().enumerate() {
            if !self.tallies.contains_key(id) {
                return Err(AggregateError::UnknownEntity {
                    list: ranked.list_id.clone(),
                    id: id.clone(),
                });
            }
            if ranked.positions[..i].contains(id) {
                return Err(AggregateError::RepeatedEntity(ranked.list_id.clone()));
            }
        }
        self.lists += 1;
        if degraded {
            self.degraded_lists += 1;
        }
        let skip = degraded && policy == DegradedPolicy::Exclude;
        for (i, id) in ranked.positions.iter().enumerate() {
            let tally = self.tallies.get_mut(id).expect("checked above");
            if degraded {
                tally.degraded += 1;
            }
            if !skip {
                tally.total += i as u64 + 1;
                tally.occurrences += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ScoreTable) {
        for (id, t) in &other.tallies {
            let mine = self.tallies.entry(id.clone()).or_default();
            mine.total += t.total;
            mine.occurrences += t.occurrences;
            mine.degraded += t.degraded;
        }
        self.lists += other.lists;
        self.degraded_lists += other.degraded_lists;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan_seed: u64,
    pub ranker: RankerKind,
    pub lists: u64,
    pub degraded_lists: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntity<F> {
    pub id: EntityId,
    pub score: u64,
    pub occurrences: u64,
    /// `None` when the entity was never scored.
    pub mean_position: Option<F>,
    pub decoder_score: F,
    /// Never scored; placed last.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unscored: bool,
}

/// Final expansion ordering for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionResult<F> {
    pub query_id: String,
    pub entities: Vec<RankedEntity<F>>,
    pub provenance: Provenance,
}

impl<F: Scalar> ExpansionResult<F> {
    pub fn order(&self) -> impl Iterator<Item = &EntityId> {
        self.entities.iter().map(|e| &e.id)
    }
}

/// Sorts candidates by mean position ascending, then decoder score
/// descending, then id ascending. Never-scored entities go last.
pub fn finalize<F: Scalar>(
    table: &ScoreTable,
    candidates: &CandidateSet<F>,
    plan_seed: u64,
    ranker: RankerKind,
) -> ExpansionResult<F> {
    struct Row<'a, F> {
        id: &'a EntityId,
        tally: Tally,
        mean: Option<Ratio<u64>>,
        decoder: F,
    }
    let mut rows: Vec<Row<'_, F>> = candidates
        .entities
        .iter()
        .map(|c| {
            let tally = table.tally(&c.id).copied().unwrap_or_default();
            Row {
                id: &c.id,
                tally,
                mean: tally.mean(),
                decoder: c.score,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let by_mean = match (&a.mean, &b.mean) {
            (Some(x), Some(y)) => x.cmp(y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        by_mean
            .then_with(|| b.decoder.partial_cmp(&a.decoder).unwrap_or(Ordering::Equal))
            .then_with(|| a.id.cmp(b.id))
    });
    ExpansionResult {
        query_id: candidates.query_id.clone(),
        entities: rows
            .into_iter()
            .map(|r| RankedEntity {
                id: r.id.clone(),
                score: r.tally.total,
                occurrences: r.tally.occurrences,
                mean_position: r.mean.map(|m| F::ratio(*m.numer(), *m.denom())),
                decoder_score: r.decoder,
                unscored: r.mean.is_none(),
            })
            .collect(),
        provenance: Provenance {
            plan_seed,
            ranker,
            lists: table.lists(),
            degraded_lists: table.degraded_lists(),
        },
    }
}
