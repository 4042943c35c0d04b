//! MAP@K, P@K and Kendall tau.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::ExpansionResult;
use crate::corpus::{EntityId, Query};
use crate::scalar::Scalar;

pub const DEFAULT_KS: [usize; 4] = [10, 20, 50, 100];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("result for query `{0}` has no matching query")]
    UnknownQuery(String),
    #[error("query `{0}` has no ground truth")]
    MissingGroundTruth(String),
    #[error("cutoffs must be at least 1")]
    ZeroCutoff,
}

/// Denominator of AP@K.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApNormalizer {
    /// `min(K, |truth|)`: a perfect prefix scores 1 at every K.
    #[default]
    MinKTruth,
    /// Number of hits within the top K.
    Hits,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedHandling {
    /// Seeds are removed from both the ranking and the truth.
    #[default]
    Exclude,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub ks: Vec<usize>,
    pub normalizer: ApNormalizer,
    pub seeds: SeedHandling,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            normalizer: ApNormalizer::default(),
            seeds: SeedHandling::default(),
        }
    }
}

/// AP@K with the default `min(K, |truth|)` normalizer.
///
/// # Panics
/// If `k == 0` or `truth` is empty.
pub fn average_precision_at_k<T: Eq + Hash, F: Scalar>(ranked: &[T], truth: &HashSet<T>, k: usize) -> F {
    average_precision_at_k_with(ranked, truth, k, ApNormalizer::MinKTruth)
}

pub fn average_precision_at_k_with<T: Eq + Hash, F: Scalar>(
    ranked: &[T],
    truth: &HashSet<T>,
    k: usize,
    normalizer: ApNormalizer,
) -> F {
    assert!(k >= 1, "K must be at least 1");
    assert!(!truth.is_empty(), "truth must be non-empty");
    let mut hits = 0u64;
    let mut sum = F::zero();
    for (i, item) in ranked.iter().take(k).enumerate() {
        if truth.contains(item) {
            hits += 1;
            sum = sum + F::ratio(hits, i as u64 + 1);
        }
    }
    let z = match normalizer {
        ApNormalizer::MinKTruth => k.min(truth.len()) as u64,
        ApNormalizer::Hits => hits,
    };
    if z == 0 {
        F::zero()
    } else {
        sum / F::of(z as f64)
    }
}

/// `|top-K ∩ truth| / K`; the denominator stays `K` for short rankings.
pub fn precision_at_k<T: Eq + Hash, F: Scalar>(ranked: &[T], truth: &HashSet<T>, k: usize) -> F {
    assert!(k >= 1, "K must be at least 1");
    let hits = ranked.iter().take(k).filter(|item| truth.contains(item)).count();
    F::ratio(hits as u64, k as u64)
}

/// Kendall rank correlation between two orderings of the same items.
///
/// Items missing from either ordering are ignored. Returns 1 for fewer than
/// two shared items.
pub fn kendall_tau<T: Eq + Hash, F: Scalar>(a: &[T], b: &[T]) -> F {
    let pos_b: HashMap<&T, usize> = b.iter().enumerate().map(|(i, x)| (x, i)).collect();
    let shared: Vec<usize> = a.iter().filter_map(|x| pos_b.get(x).copied()).collect();
    let n = shared.len() as u64;
    if n < 2 {
        return F::one();
    }
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    for i in 0..shared.len() {
        for j in i + 1..shared.len() {
            if shared[i] < shared[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = n * (n - 1) / 2;
    (F::of(concordant as f64) - F::of(discordant as f64)) / F::of(pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics<F> {
    pub query_id: String,
    pub seed_size: usize,
    pub ap: BTreeMap<usize, F>,
    pub precision: BTreeMap<usize, F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport<F> {
    pub query_count: usize,
    pub map: BTreeMap<usize, F>,
    pub precision: BTreeMap<usize, F>,
}

impl<F: Scalar> PartitionReport<F> {
    fn from_queries<'a>(ks: &[usize], rows: impl Iterator<Item = &'a QueryMetrics<F>>) -> Self {
        let rows: Vec<&QueryMetrics<F>> = rows.collect();
        let mean = |pick: &dyn Fn(&QueryMetrics<F>) -> F| {
            if rows.is_empty() {
                F::zero()
            } else {
                rows.iter().map(|r| pick(r)).sum::<F>() / F::of(rows.len() as f64)
            }
        };
        Self {
            query_count: rows.len(),
            map: ks.iter().map(|&k| (k, mean(&|r| r.ap[&k]))).collect(),
            precision: ks.iter().map(|&k| (k, mean(&|r| r.precision[&k]))).collect(),
        }
    }

    /// Mean of every MAP@K and P@K value.
    pub fn average(&self) -> F {
        let values: Vec<F> = self.map.values().chain(self.precision.values()).copied().collect();
        if values.is_empty() {
            F::zero()
        } else {
            values.iter().copied().sum::<F>() / F::of(values.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<F> {
    pub ks: Vec<usize>,
    pub combined: PartitionReport<F>,
    pub seed_3: PartitionReport<F>,
    pub seed_5: PartitionReport<F>,
    pub queries: Vec<QueryMetrics<F>>,
    /// Queries left without truth after seed exclusion.
    pub skipped: Vec<String>,
}

/// Scores one ranking against its query, or `None` when nothing is left to find.
pub fn score_query<F: Scalar>(
    ranked: &[EntityId],
    query: &Query,
    config: &MetricsConfig,
) -> Result<Option<QueryMetrics<F>>, MetricsError> {
    let truth = query
        .ground_truth
        .as_ref()
        .ok_or_else(|| MetricsError::MissingGroundTruth(query.query_id.clone()))?;
    let seeds: HashSet<&EntityId> = match config.seeds {
        SeedHandling::Exclude => query.seeds.iter().collect(),
        SeedHandling::Keep => HashSet::new(),
    };
    let truth: HashSet<&EntityId> = truth.iter().filter(|id| !seeds.contains(id)).collect();
    if truth.is_empty() {
        return Ok(None);
    }
    let ranked: Vec<&EntityId> = ranked.iter().filter(|id| !seeds.contains(id)).collect();
    Ok(Some(QueryMetrics {
        query_id: query.query_id.clone(),
        seed_size: query.seed_size(),
        ap: config
            .ks
            .iter()
            .map(|&k| (k, average_precision_at_k_with(&ranked, &truth, k, config.normalizer)))
            .collect(),
        precision: config
            .ks
            .iter()
            .map(|&k| (k, precision_at_k(&ranked, &truth, k)))
            .collect(),
    }))
}

pub fn evaluate<F: Scalar>(
    results: &[ExpansionResult<F>],
    queries: &[Query],
    config: &MetricsConfig,
) -> Result<MetricsReport<F>, MetricsError> {
    if config.ks.contains(&0) {
        return Err(MetricsError::ZeroCutoff);
    }
    let by_id: HashMap<&str, &Query> = queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for result in results {
        let query = by_id
            .get(result.query_id.as_str())
            .ok_or_else(|| MetricsError::UnknownQuery(result.query_id.clone()))?;
        let ranked: Vec<EntityId> = result.order().cloned().collect();
        match score_query(&ranked, query, config)? {
            Some(row) => rows.push(row),
            None => {
                warn!(
                    "query {}: no ground truth left after seed exclusion; skipped",
                    query.query_id
                );
                skipped.push(query.query_id.clone());
            }
        }
    }
    Ok(MetricsReport {
        ks: config.ks.clone(),
        combined: PartitionReport::from_queries(&config.ks, rows.iter()),
        seed_3: PartitionReport::from_queries(&config.ks, rows.iter().filter(|r| r.seed_size == 3)),
        seed_5: PartitionReport::from_queries(&config.ks, rows.iter().filter(|r| r.seed_size == 5)),
        queries: rows,
        skipped,
    })
}

impl<F: Scalar> MetricsReport<F> {
    /// Fixed-width table: MAP@K columns, P@K columns, then their average, in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12}{:>6}", "Seeds", "|Q|");
        for k in &self.ks {
            let _ = write!(out, "{:>9}", format!("MAP@{k}"));
        }
        for k in &self.ks {
            let _ = write!(out, "{:>8}", format!("P@{k}"));
        }
        let _ = writeln!(out, "{:>8}", "Avg");
        for (label, part) in [("3", &self.seed_3), ("5", &self.seed_5), ("combined", &self.combined)] {
            let pct = |v: F| v.to_f64().unwrap_or(f64::NAN) * 100.0;
            let _ = write!(out, "{label:<12}{:>6}", part.query_count);
            for v in part.map.values() {
                let _ = write!(out, "{:>9.2}", pct(*v));
            }
            for v in part.precision.values() {
                let _ = write!(out, "{:>8.2}", pct(*v));
            }
            let _ = writeln!(out, "{:>8.2}", pct(part.average()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{Provenance, RankedEntity};
    use crate::ranker::RankerKind;

    fn set(items: &[&str]) -> HashSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn list(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn worked_example() {
        let ap: f64 = average_precision_at_k(&list(&["a", "x", "b"]), &set(&["a", "b", "c"]), 3);
        assert!((ap - (1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((ap - 0.5556).abs() < 1e-4);
        let p: f64 = precision_at_k(&list(&["a", "x", "b"]), &set(&["a", "b", "c"]), 3);
        assert_eq!(p, 2.0 / 3.0);
    }

    #[test]
    fn perfect_and_empty() {
        let truth = set(&["a", "b", "c"]);
        let ap: f64 = average_precision_at_k(&list(&["c", "a", "b"]), &truth, 3);
        assert_eq!(ap, 1.0);
        let ap: f64 = average_precision_at_k(&list(&["x", "y", "z", "a"]), &truth, 3);
        assert_eq!(ap, 0.0);
        let p: f64 = precision_at_k(&list(&["a", "x", "b"]), &truth, 10);
        assert_eq!(p, 0.2);
        let p: f64 = precision_at_k(&Vec::<String>::new(), &truth, 5);
        assert_eq!(p, 0.0);
        let hits: f64 = average_precision_at_k_with(&list(&["a", "x", "b"]), &truth, 3, ApNormalizer::Hits);
        assert!((hits - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let single: f32 = average_precision_at_k(&list(&["a"]), &truth, 1);
        assert_eq!(single, 1.0f32);
    }

    #[test]
    fn kendall() {
        let t: f64 = kendall_tau(&[1, 2, 3, 4, 5], &[3, 4, 1, 2, 5]);
        // four discordant pairs out of ten
        assert!((t - 0.2).abs() < 1e-12);
        let same: f64 = kendall_tau(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(same, 1.0);
        let rev: f64 = kendall_tau(&[1, 2, 3], &[3, 2, 1]);
        assert_eq!(rev, -1.0);
    }

    fn result(query_id: &str, order: &[&str]) -> ExpansionResult<f64> {
        ExpansionResult {
            query_id: query_id.into(),
            entities: order
                .iter()
                .map(|id| RankedEntity {
                    id: EntityId::from(*id),
                    score: 0,
                    occurrences: 0,
                    mean_position: None,
                    decoder_score: 0.0,
                    unscored: false,
                })
                .collect(),
            provenance: Provenance {
                plan_seed: 0,
                ranker: RankerKind::PerfectOracle,
                lists: 0,
                degraded_lists: 0,
            },
        }
    }

    fn query(id: &str, seeds: &[&str], truth: &[&str]) -> Query {
        Query {
            query_id: id.into(),
            seeds: seeds.iter().map(|s| EntityId::from(*s)).collect(),
            class_name: None,
            ground_truth: Some(truth.iter().map(|s| EntityId::from(*s)).collect()),
        }
    }

    #[test]
    fn evaluate_partitions_and_excludes_seeds() {
        let q3 = query("q3", &["s1", "s2", "s3"], &["s1", "s2", "s3", "a", "b"]);
        let q5 = query(
            "q5",
            &["s1", "s2", "s3", "s4", "s5"],
            &["s1", "s2", "s3", "s4", "s5", "c"],
        );
        let results = vec![result("q3", &["s1", "a", "x", "b"]), result("q5", &["x", "c"])];
        let cfg = MetricsConfig {
            ks: vec![2],
            ..Default::default()
        };
        let report = evaluate(&results, &[q3, q5], &cfg).unwrap();
        // q3 after exclusion: [a, x, b], truth {a, b}: AP@2 = 1/2.
        assert_eq!(report.seed_3.map[&2], 0.5);
        // q5: [x, c], truth {c}: AP@2 = (1/2) / 1.
        assert_eq!(report.seed_5.map[&2], 0.5);
        assert_eq!(report.combined.query_count, 2);
        assert_eq!(report.seed_5.precision[&2], 0.5);
        let table = report.to_table();
        assert!(table.contains("MAP@2"));
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn map_is_mean_of_ap() {
        let q1 = query(
            "a",
            &["s1", "s2", "s3"],
            &["s1", "s2", "s3", "t1", "t2", "t3", "t4", "t5"],
        );
        let q2 = query(
            "b",
            &["s1", "s2", "s3"],
            &["s1", "s2", "s3", "t1", "t2", "t3", "t4", "t5"],
        );
        let r1 = result("a", &["t1", "x", "t2", "y", "t3"]);
        let r2 = result("b", &["x", "t1", "y", "t2", "z", "t3", "t4"]);
        let cfg = MetricsConfig {
            ks: vec![10],
            ..Default::default()
        };
        let report = evaluate(&[r1, r2], &[q1, q2], &cfg).unwrap();
        let aps: Vec<f64> = report.queries.iter().map(|q| q.ap[&10]).collect();
        assert!((report.combined.map[&10] - (aps[0] + aps[1]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_errors_and_skips() {
        let q = query("q", &["s1", "s2", "s3"], &["s1", "s2", "s3"]);
        let report = evaluate(
            &[result("q", &["a"])],
            std::slice::from_ref(&q),
            &MetricsConfig::default(),
        )
        .unwrap();
        assert_eq!(report.skipped, vec!["q".to_string()]);
        assert_eq!(report.combined.query_count, 0);
        assert_eq!(
            evaluate(
                &[result("zz", &["a"])],
                std::slice::from_ref(&q),
                &MetricsConfig::default()
            ),
            Err(MetricsError::UnknownQuery("zz".into()))
        );
        let mut bare = q;
        bare.ground_truth = None;
        assert_eq!(
            evaluate(&[result("q", &["a"])], &[bare], &MetricsConfig::default()),
            Err(MetricsError::MissingGroundTruth("q".into()))
        );
    }
}
