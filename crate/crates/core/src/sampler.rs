//! Balanced listwise sampling.
//!
//! A plan cuts `o` shuffled copies of the candidate ids into lists of `n`, so
//! every candidate is compared in exactly `o` lists. When `n` does not divide
//! `o * N`, the last list is completed with one extra occurrence of each of the
//! `n - (o * N mod n)` best-scored candidates.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::EntityId;
use crate::decoder::CandidateSet;
use crate::scalar::Scalar;

pub const DEFAULT_LIST_LEN: usize = 5;
pub const DEFAULT_OCCURRENCES: usize = 10;
const MAX_RETRIES: u64 = 16;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("{candidates} candidates cannot fill lists of {n}")]
    InsufficientCandidates { candidates: usize, n: usize },
    #[error("list length must be at least 2, got {0}")]
    ListTooShort(usize),
    #[error("occurrence count must be at least 1")]
    ZeroOccurrences,
    #[error("candidate set contains duplicate id `{0}`")]
    DuplicateCandidate(EntityId),
    #[error("could not repair duplicate list members after {0} attempts")]
    RepairFailed(u64),
    #[error("plan line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleList {
    pub list_id: String,
    pub query_id: String,
    /// Presentation order, before ranking.
    pub members: Vec<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub query_id: String,
    pub lists: Vec<SampleList>,
    pub n: usize,
    pub o: usize,
    pub seed: u64,
    /// Candidates given one extra occurrence to complete the last list.
    pub padded: Vec<EntityId>,
}

/// Occurrence assignment for a (N, n, o) configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padding {
    /// Number of extra slots, `0` when `n` divides `o * N`.
    pub extra_slots: usize,
    /// Number of lists, `ceil(o * N / n)`.
    pub lists: usize,
}

pub fn pad_policy(num_candidates: usize, n: usize, o: usize) -> Padding {
    let slots = o * num_candidates;
    let residual = slots % n;
    let extra_slots = if residual == 0 { 0 } else { n - residual };
    Padding {
        extra_slots,
        lists: slots.div_ceil(n),
    }
}

fn derived_seed(seed: u64, attempt: u64) -> u64 {
    seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds a balanced plan. `candidates` must be ordered best first (as the
/// decoder returns them); that order selects the padded entities.
pub fn build_plan<F: Scalar>(
    candidates: &CandidateSet<F>,
    n: usize,
    o: usize,
    seed: u64,
) -> Result<SamplePlan, SampleError> {
    let ids: Vec<EntityId> = candidates.ids().cloned().collect();
    build_plan_for_ids(&candidates.query_id, &ids, n, o, seed)
}

/// Same as [`build_plan`] over a bare id list ordered best first.
pub fn build_plan_for_ids(
    query_id: &str,
    ids: &[EntityId],
    n: usize,
    o: usize,
    seed: u64,
) -> Result<SamplePlan, SampleError> {
    if n < 2 {
        return Err(SampleError::ListTooShort(n));
    }
    if o == 0 {
        return Err(SampleError::ZeroOccurrences);
    }
    if ids.len() < n {
        return Err(SampleError::InsufficientCandidates {
            candidates: ids.len(),
            n,
        });
    }
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(dup) = ids.iter().find(|id| !seen.insert(*id)) {
        return Err(SampleError::DuplicateCandidate(dup.clone()));
    }

    let padding = pad_policy(ids.len(), n, o);
    let padded: Vec<EntityId> = ids[..padding.extra_slots].to_vec();

    for attempt in 0..=MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, attempt));
        let mut sequence: Vec<usize> = Vec::with_capacity(padding.lists * n);
        for _ in 0..o {
            let mut copy: Vec<usize> = (0..ids.len()).collect();
            copy.shuffle(&mut rng);
            sequence.extend(copy);
        }
        let mut extra: Vec<usize> = (0..padding.extra_slots).collect();
        extra.shuffle(&mut rng);
        sequence.extend(extra);

        if repair(&mut sequence, n) {
            let lists = sequence
                .chunks(n)
                .enumerate()
                .map(|(i, chunk)| SampleList {
                    list_id: format!("{query_id}#{i:05}"),
                    query_id: query_id.to_owned(),
                    members: chunk.iter().map(|&k| ids[k].clone()).collect(),
                })
                .collect();
            return Ok(SamplePlan {
                query_id: query_id.to_owned(),
                lists,
                n,
                o,
                seed,
                padded,
            });
        }
        log::debug!("plan for {query_id}: repair failed on attempt {attempt}, reseeding");
    }
    Err(SampleError::RepairFailed(MAX_RETRIES + 1))
}

/// Removes within-list duplicates in place. A duplicate is first swapped with
/// the nearest later element absent from its list; if none exists (last list)
/// it is exchanged with an element of an earlier list that can take it.
fn repair(sequence: &mut [usize], n: usize) -> bool {
    let len = sequence.len();
    for start in (0..len).step_by(n) {
        let end = (start + n).min(len);
        for j in start..end {
            if !sequence[start..j].contains(&sequence[j]) {
                continue;
            }
            let clashes = |seq: &[usize], v: usize| seq[start..j].contains(&v) || seq[j + 1..end].contains(&v);
            match (end..len).find(|&q| !clashes(sequence, sequence[q])) {
                Some(q) => sequence.swap(j, q),
                None => {
                    if !backward_swap(sequence, n, start, end, j) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn backward_swap(sequence: &mut [usize], n: usize, start: usize, end: usize, j: usize) -> bool {
    let value = sequence[j];
    let current: Vec<usize> = sequence[start..end]
        .iter()
        .enumerate()
        .filter(|&(k, _)| start + k != j)
        .map(|(_, &v)| v)
        .collect();
    for earlier in (0..start).step_by(n) {
        let list = &sequence[earlier..earlier + n];
        if list.contains(&value) {
            continue;
        }
        if let Some(k) = list.iter().position(|v| !current.contains(v)) {
            sequence.swap(j, earlier + k);
            return true;
        }
    }
    false
}

impl SamplePlan {
    pub fn num_lists(&self) -> usize {
        self.lists.len()
    }

    /// Occurrence count per entity.
    pub fn occurrences(&self) -> BTreeMap<&EntityId, usize> {
        let mut counts = BTreeMap::new();
        for list in &self.lists {
            for id in &list.members {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for list in &self.lists {
            serde_json::to_writer(&mut out, list)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn write_lists_jsonl<'a, W: Write>(
    lists: impl IntoIterator<Item = &'a SampleList>,
    mut out: W,
) -> std::io::Result<()> {
    for list in lists {
        serde_json::to_writer(&mut out, list)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_lists_jsonl<R: BufRead>(input: R) -> Result<Vec<SampleList>, SampleError> {
    let mut lists = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lists.push(serde_json::from_str(&line).map_err(|e| SampleError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(lists)
}

/// Hex SHA-256 of the JSON Lines serialization of `lists`.
pub fn plan_digest<'a>(lists: impl IntoIterator<Item = &'a SampleList>) -> String {
    let mut buf = Vec::new();
    write_lists_jsonl(lists, &mut buf).expect("in-memory write");
    hex::encode(Sha256::digest(&buf))
}
