//! Synthetic recovery experiments: a candidate set with a hidden strict
//! order, ranked list by list, aggregated and compared with the hidden order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{finalize, DegradedPolicy, ScoreTable};
use crate::corpus::{Entity, EntityId, Query};
use crate::decoder::{Candidate, CandidateSet};
use crate::metrics::kendall_tau;
use crate::pipeline::StageError;
use crate::ranker::{build_ranker, RankRequest, RankerConfig};
use crate::sampler::build_plan_for_ids;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoverySetup {
    pub num_candidates: usize,
    pub n: usize,
    pub o: usize,
    pub plan_seed: u64,
    /// Seeds the hidden order; candidate ids carry no information about it.
    pub truth_seed: u64,
    pub ranker: RankerConfig,
}

/// Kendall tau between the aggregated order and the hidden order. Decoder
/// scores are all equal, so remaining ties fall back to id order, which is
/// independent of the hidden order.
pub fn recovery_tau(setup: &RecoverySetup) -> Result<f64, StageError> {
    let entities: Vec<Entity> = (0..setup.num_candidates)
        .map(|i| Entity::new(format!("c{i:05}"), format!("candidate {i}")))
        .collect::<Result<_, _>>()?;
    let seeds: Vec<Entity> = (0..3)
        .map(|i| Entity::new(format!("s{i}"), format!("seed {i}")))
        .collect::<Result<_, _>>()?;
    let ids: Vec<EntityId> = entities.iter().map(|e| e.id.clone()).collect();
    let mut truth = ids.clone();
    truth.shuffle(&mut ChaCha8Rng::seed_from_u64(setup.truth_seed));

    let query = Query {
        query_id: "synthetic".into(),
        seeds: seeds.iter().map(|e| e.id.clone()).collect(),
        class_name: None,
        ground_truth: Some(truth.clone()),
    };
    let set = CandidateSet {
        query_id: query.query_id.clone(),
        entities: ids
            .iter()
            .map(|id| Candidate {
                id: id.clone(),
                score: 0.0f64,
            })
            .collect(),
        clamped: false,
    };
    let plan = build_plan_for_ids(&query.query_id, &ids, setup.n, setup.o, setup.plan_seed)?;
    let ranker = build_ranker(&setup.ranker)?;
    let index: std::collections::HashMap<&EntityId, &Entity> = entities.iter().map(|e| (&e.id, e)).collect();
    let mut table = ScoreTable::new(set.ids());
    for list in &plan.lists {
        let request = RankRequest {
            query: &query,
            seeds: seeds.iter().collect(),
            list,
            members: list.members.iter().map(|id| index[id]).collect(),
        };
        let outcome = ranker.rank(&request)?;
        table.accumulate(&outcome.ranked, outcome.degraded, DegradedPolicy::Include)?;
    }
    let result = finalize(&table, &set, plan.seed, ranker.kind());
    let order: Vec<EntityId> = result.order().cloned().collect();
    Ok(kendall_tau::<EntityId, f64>(&order, &truth))
}
