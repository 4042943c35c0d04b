//! End-to-end runs: decode, plan, rank, score and evaluate, with every stage
//! checkpointed in a run directory so an interrupted run can be resumed and a
//! finished one replayed from its transcripts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregator::{finalize, AggregateError, ExpansionResult, ScoreTable};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{load_queries, CorpusError, EntityId, Query, Vocabulary};
use crate::decoder::{decode, CandidateSet, DecodeError, DecodeOptions, OverlapScorer};
use crate::metrics::{evaluate, kendall_tau, MetricsError, MetricsReport};
use crate::ranker::{RankError, RankOutcome, RankRequest, Ranker, RankerKind};
use crate::sampler::{
    build_plan, plan_digest, read_lists_jsonl, write_lists_jsonl, SampleError, SampleList, SamplePlan,
};
use crate::transcript::{self, TranscriptRecord, TranscriptStore};
use crate::trie::{PrefixTrie, TrieError};

pub const CONFIG_FILE: &str = "config.json";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const PLAN_FILE: &str = "plan.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const RESULT_FILE: &str = "result.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_TABLE_FILE: &str = "metrics.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Load,
    Decode,
    Plan,
    Rank,
    Score,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::Decode => "decode",
            Stage::Plan => "plan",
            Stage::Rank => "rank",
            Stage::Score => "score",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Trie(#[from] TrieError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Integrity(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed (last completed stage: {}): {source}", .checkpoint.map_or("none".to_owned(), |s| s.to_string()))]
    Stage {
        stage: Stage,
        checkpoint: Option<Stage>,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { source, .. } => match source {
                StageError::Rank(RankError::Config(_)) | StageError::Rank(RankError::MissingGroundTruth(_)) => 2,
                _ => 3,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StageError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| StageError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| StageError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Directory holding one run's artifacts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates `<output_dir>/run-<UTC timestamp>`, adding a suffix on collision.
    pub fn create_timestamped(output_dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(output_dir)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let mut root = output_dir.join(format!("run-{stamp}"));
        let mut suffix = 1;
        loop {
            match fs::create_dir(&root) {
                Ok(()) => return Ok(Self { root }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    root = output_dir.join(format!("run-{stamp}-{suffix}"));
                    suffix += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// The last stage whose artifact is present.
    pub fn checkpoint(&self) -> Option<Stage> {
        [
            (Stage::Eval, METRICS_FILE),
            (Stage::Score, RESULT_FILE),
            (Stage::Rank, TRANSCRIPTS_FILE),
            (Stage::Plan, PLAN_FILE),
            (Stage::Decode, CANDIDATES_FILE),
            (Stage::Load, CONFIG_FILE),
        ]
        .into_iter()
        .find(|(_, name)| self.file(name).exists())
        .map(|(stage, _)| stage)
    }
}

/// Per-query plan seed, so queries get independent shuffles.
pub fn query_seed(seed: u64, query_id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(query_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSummary {
    pub lists: u64,
    /// Ranker invocations made by this call.
    pub issued: u64,
    /// Lists already present in the transcript store.
    pub reused: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub query_id: String,
    pub candidates: usize,
    pub clamped: bool,
    pub plan_seed: u64,
    pub lists: usize,
    pub padded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub created_at: String,
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub timings_ms: BTreeMap<Stage, u64>,
    pub plan_digest: String,
    pub queries: Vec<QuerySummary>,
    pub lists: u64,
    pub ranker_calls: u64,
    pub reused_transcripts: u64,
    pub degraded_lists: u64,
    pub degraded_fraction: f64,
    pub degraded_over_threshold: bool,
    /// Combined-partition MAP@K and P@K, when ground truth was available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub results: Vec<ExpansionResult<f64>>,
    pub report: Option<MetricsReport<f64>>,
    /// Per labelled query, Kendall tau of the final order against [`truth_order`].
    pub kendall_taus: Vec<f64>,
}

/// Loaded inputs plus the run directory they are processed into.
pub struct Workspace {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub queries: Vec<Query>,
    pub trie: PrefixTrie,
    pub dir: RunDir,
}

type StageResult<T> = Result<T, StageError>;

impl Workspace {
    /// Starts a fresh run under `config.paths.output_dir`.
    pub fn create(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let dir = RunDir::create_timestamped(&config.paths.output_dir).map_err(|source| PipelineError::Stage {
            stage: Stage::Load,
            checkpoint: None,
            source: StageError::Io {
                path: config.paths.output_dir.clone(),
                source,
            },
        })?;
        Self::load(config, dir)
    }

    /// Opens (or creates) an explicit run directory. An existing directory
    /// must have been produced with the same configuration.
    pub fn open(config: RunConfig, root: &Path) -> Result<Self, PipelineError> {
        config.validate()?;
        let dir = RunDir::open(root).map_err(|source| PipelineError::Stage {
            stage: Stage::Load,
            checkpoint: None,
            source: StageError::Io {
                path: root.to_path_buf(),
                source,
            },
        })?;
        let snapshot = dir.file(CONFIG_FILE);
        if snapshot.exists() {
            let previous: RunConfig = read_json(&snapshot).map_err(|e| Self::fail(&dir, Stage::Load, e))?;
            if previous != config {
                return Err(ConfigError::Invalid(format!(
                    "{} was created with a different configuration",
                    dir.root().display()
                ))
                .into());
            }
        }
        Self::load(config, dir)
    }

    fn load(config: RunConfig, dir: RunDir) -> Result<Self, PipelineError> {
        let loaded = (|| -> StageResult<_> {
            let vocab = Vocabulary::load(&config.paths.vocab)?;
            let queries = load_queries(&config.paths.queries, &vocab)?;
            let trie = PrefixTrie::build(&vocab)?;
            write_json(&dir.file(CONFIG_FILE), &config)?;
            Ok((vocab, queries, trie))
        })();
        let (vocab, queries, trie) = loaded.map_err(|e| Self::fail(&dir, Stage::Load, e))?;
        info!(
            "loaded {} entities and {} queries into {}",
            vocab.len(),
            queries.len(),
            dir.root().display()
        );
        Ok(Self {
            config,
            vocab,
            queries,
            trie,
            dir,
        })
    }

    fn fail(dir: &RunDir, stage: Stage, source: StageError) -> PipelineError {
        PipelineError::Stage {
            stage,
            checkpoint: dir.checkpoint().filter(|c| *c < stage),
            source,
        }
    }

    fn stage<T>(&self, stage: Stage, f: impl FnOnce() -> StageResult<T>) -> Result<T, PipelineError> {
        f().map_err(|e| Self::fail(&self.dir, stage, e))
    }

    fn query(&self, query_id: &str) -> StageResult<&Query> {
        self.queries
            .iter()
            .find(|q| q.query_id == query_id)
            .ok_or_else(|| StageError::Integrity(format!("unknown query `{query_id}` in run artifacts")))
    }

    /// Candidate sets, one per query, reused from the run directory when present.
    pub fn decode(&self) -> Result<Vec<CandidateSet<f64>>, PipelineError> {
        self.stage(Stage::Decode, || {
            let path = self.dir.file(CANDIDATES_FILE);
            if path.exists() {
                let sets: Vec<CandidateSet<f64>> = read_json(&path)?;
                for set in &sets {
                    self.query(&set.query_id)?;
                }
                return Ok(sets);
            }
            let sets = decode_all(&self.config, &self.vocab, &self.trie, &self.queries)?;
            write_json(&path, &sets)?;
            Ok(sets)
        })
    }

    /// Sample plans, one per query, reused from the run directory when present.
    pub fn plan(&self, candidates: &[CandidateSet<f64>]) -> Result<Vec<SamplePlan>, PipelineError> {
        self.stage(Stage::Plan, || {
            let path = self.dir.file(PLAN_FILE);
            let stored = if path.exists() {
                let file = fs::File::open(&path).map_err(io_err(&path))?;
                Some(read_lists_jsonl(BufReader::new(file))?)
            } else {
                None
            };
            let plans = match stored {
                Some(lists) => rebuild_plans(&self.config, candidates, lists)?,
                None => {
                    let plans = plan_all(&self.config, candidates)?;
                    let mut bytes = Vec::new();
                    write_lists_jsonl(plans.iter().flat_map(|p| &p.lists), &mut bytes).map_err(io_err(&path))?;
                    write_atomic(&path, &bytes)?;
                    plans
                }
            };
            Ok(plans)
        })
    }

    /// Ranks every list that has no transcript yet, appending as results arrive.
    pub fn rank(&self, plans: &[SamplePlan], ranker: &dyn Ranker) -> Result<RankSummary, PipelineError> {
        self.stage(Stage::Rank, || {
            let path = self.dir.file(TRANSCRIPTS_FILE);
            let done = transcript::load(&path).map_err(io_err(&path))?;
            let store = TranscriptStore::open(&path).map_err(io_err(&path))?;
            let total: usize = plans.iter().map(|p| p.lists.len()).sum();
            let mut requests = Vec::new();
            for plan in plans {
                let query = self.query(&plan.query_id)?;
                for list in plan.lists.iter().filter(|l| !done.contains_key(&l.list_id)) {
                    requests.push(build_request(&self.vocab, query, list)?);
                }
            }
            let reused = (total - requests.len()) as u64;
            if reused > 0 {
                info!("reusing {reused} transcripts; {} lists left to rank", requests.len());
            }
            let issued = requests.len() as u64;
            let sink = |request: &RankRequest<'_>, outcome: RankOutcome| {
                let record = TranscriptRecord::from_outcome(&request.query.query_id, outcome);
                store.append(&record).map_err(io_err(store.path()))
            };
            rank_requests(ranker, &requests, self.config.max_in_flight, &sink)?;
            Ok(RankSummary {
                lists: total as u64,
                issued,
                reused,
            })
        })
    }

    /// Aggregates the transcripts of every planned list into final orderings.
    pub fn score(
        &self,
        candidates: &[CandidateSet<f64>],
        plans: &[SamplePlan],
    ) -> Result<Vec<ExpansionResult<f64>>, PipelineError> {
        self.stage(Stage::Score, || {
            let path = self.dir.file(TRANSCRIPTS_FILE);
            let records = transcript::load(&path).map_err(io_err(&path))?;
            let ranker = self.config.ranker.kind();
            let mut results = Vec::with_capacity(plans.len());
            for (set, plan) in candidates.iter().zip(plans) {
                let mut table = ScoreTable::new(set.ids());
                for list in &plan.lists {
                    let record = records.get(&list.list_id).ok_or_else(|| {
                        StageError::Integrity(format!("list `{}` has no transcript; run the rank stage", list.list_id))
                    })?;
                    let ranked = record.ranked();
                    if !ranked.is_permutation_of(&list.members) {
                        return Err(StageError::Integrity(format!(
                            "transcript for `{}` is not a permutation of the planned list",
                            list.list_id
                        )));
                    }
                    table.accumulate(&ranked, record.degraded, self.config.degraded_lists)?;
                }
                results.push(finalize(&table, set, plan.seed, ranker));
            }
            write_json(&self.dir.file(RESULT_FILE), &results)?;
            Ok(results)
        })
    }

    /// Results written by an earlier score stage.
    pub fn load_results(&self) -> Result<Vec<ExpansionResult<f64>>, PipelineError> {
        self.stage(Stage::Eval, || read_json(&self.dir.file(RESULT_FILE)))
    }

    /// Metrics over queries with ground truth, or `None` when no query has any.
    pub fn evaluate(&self, results: &[ExpansionResult<f64>]) -> Result<Option<MetricsReport<f64>>, PipelineError> {
        self.stage(Stage::Eval, || {
            let labelled: Vec<ExpansionResult<f64>> = results
                .iter()
                .filter(|r| {
                    self.queries
                        .iter()
                        .any(|q| q.query_id == r.query_id && q.ground_truth.is_some())
                })
                .cloned()
                .collect();
            if labelled.is_empty() {
                info!("no ground truth available; skipping evaluation");
                return Ok(None);
            }
            let report = evaluate(&labelled, &self.queries, &self.config.metrics)?;
            write_json(&self.dir.file(METRICS_FILE), &report)?;
            let table = self.dir.file(METRICS_TABLE_FILE);
            write_atomic(&table, report.to_table().as_bytes())?;
            Ok(Some(report))
        })
    }

    /// Runs every stage, skipping work whose artifacts already exist.
    pub fn run(&self, ranker: &dyn Ranker) -> Result<RunManifest, PipelineError> {
        Ok(self.run_detailed(ranker)?.manifest)
    }

    /// [`Workspace::run`], also returning the in-memory results.
    pub fn run_detailed(&self, ranker: &dyn Ranker) -> Result<RunOutput, PipelineError> {
        let mut timings = BTreeMap::new();
        let mut timed = |stage: Stage, started: Instant| {
            timings.insert(stage, started.elapsed().as_millis() as u64);
        };
        let t = Instant::now();
        let candidates = self.decode()?;
        timed(Stage::Decode, t);
        let t = Instant::now();
        let plans = self.plan(&candidates)?;
        timed(Stage::Plan, t);
        let t = Instant::now();
        let summary = self.rank(&plans, ranker)?;
        timed(Stage::Rank, t);
        let t = Instant::now();
        let results = self.score(&candidates, &plans)?;
        timed(Stage::Score, t);
        let t = Instant::now();
        let report = self.evaluate(&results)?;
        timed(Stage::Eval, t);

        let degraded: u64 = results.iter().map(|r| r.provenance.degraded_lists).sum();
        let fraction = if summary.lists == 0 {
            0.0
        } else {
            degraded as f64 / summary.lists as f64
        };
        let over = fraction > self.config.degraded_threshold;
        if degraded > 0 {
            warn!("{degraded} of {} lists degraded to presentation order", summary.lists);
        }
        let manifest = RunManifest {
            engine_version: env!("CARGO_PKG_VERSION").to_owned(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            run_dir: self.dir.root().to_path_buf(),
            config: self.config.clone(),
            timings_ms: timings,
            plan_digest: plan_digest(plans.iter().flat_map(|p| &p.lists)),
            queries: candidates
                .iter()
                .zip(&plans)
                .map(|(set, plan)| QuerySummary {
                    query_id: set.query_id.clone(),
                    candidates: set.len(),
                    clamped: set.clamped,
                    plan_seed: plan.seed,
                    lists: plan.lists.len(),
                    padded: plan.padded.len(),
                })
                .collect(),
            lists: summary.lists,
            ranker_calls: summary.issued,
            reused_transcripts: summary.reused,
            degraded_lists: degraded,
            degraded_fraction: fraction,
            degraded_over_threshold: over,
            metrics: report.as_ref().map(metric_summary),
        };
        self.stage(Stage::Eval, || write_json(&self.dir.file(MANIFEST_FILE), &manifest))?;
        let kendall_taus = candidates
            .iter()
            .zip(&results)
            .filter_map(|(set, result)| {
                let query = self.queries.iter().find(|q| q.query_id == set.query_id)?;
                let truth = truth_order(set, query)?;
                let got: Vec<EntityId> = result.order().cloned().collect();
                Some(kendall_tau::<EntityId, f64>(&got, &truth))
            })
            .collect();
        Ok(RunOutput {
            manifest,
            results,
            report,
            kendall_taus,
        })
    }
}

fn metric_summary(report: &MetricsReport<f64>) -> BTreeMap<String, f64> {
    let part = &report.combined;
    part.map
        .iter()
        .map(|(k, v)| (format!("MAP@{k}"), *v))
        .chain(part.precision.iter().map(|(k, v)| (format!("P@{k}"), *v)))
        .collect()
}

fn decode_all(
    config: &RunConfig,
    vocab: &Vocabulary,
    trie: &PrefixTrie,
    queries: &[Query],
) -> StageResult<Vec<CandidateSet<f64>>> {
    let scorer = OverlapScorer::new(vocab).with_overlap_boost(config.decoder.overlap_boost);
    let options = DecodeOptions {
        width: config.decoder.width,
        num_candidates: config.decoder.num_candidates,
        include_seeds: config.decoder.include_seeds,
    };
    queries
        .iter()
        .map(|q| {
            let set = decode(q, trie, &scorer, options)?;
            info!("query {}: {} candidates", q.query_id, set.len());
            Ok(set)
        })
        .collect()
}

fn plan_one(set: &CandidateSet<f64>, n: usize, o: usize, seed: u64) -> StageResult<SamplePlan> {
    let seed = query_seed(seed, &set.query_id);
    if set.len() <= n {
        warn!(
            "query {}: {} candidates cannot fill lists of {n}; keeping decoder order",
            set.query_id,
            set.len()
        );
        return Ok(SamplePlan {
            query_id: set.query_id.clone(),
            lists: Vec::new(),
            n,
            o,
            seed,
            padded: Vec::new(),
        });
    }
    Ok(build_plan(set, n, o, seed)?)
}

fn plan_all(config: &RunConfig, candidates: &[CandidateSet<f64>]) -> StageResult<Vec<SamplePlan>> {
    let (n, o) = (config.sampler.n, config.sampler.o);
    candidates
        .iter()
        .map(|set| plan_one(set, n, o, config.sampler.seed))
        .collect()
}

/// Regroups stored lists by query and recovers the plan metadata.
fn rebuild_plans(
    config: &RunConfig,
    candidates: &[CandidateSet<f64>],
    lists: Vec<SampleList>,
) -> StageResult<Vec<SamplePlan>> {
    let (n, o) = (config.sampler.n, config.sampler.o);
    let mut grouped: HashMap<String, Vec<SampleList>> = HashMap::new();
    for list in lists {
        grouped.entry(list.query_id.clone()).or_default().push(list);
    }
    let plans = candidates
        .iter()
        .map(|set| {
            let lists = grouped.remove(&set.query_id).unwrap_or_default();
            let mut counts: HashMap<&EntityId, usize> = HashMap::new();
            for id in lists.iter().flat_map(|l| &l.members) {
                *counts.entry(id).or_default() += 1;
            }
            let padded = set
                .ids()
                .filter(|id| counts.get(id).copied().unwrap_or(0) > o)
                .cloned()
                .collect();
            SamplePlan {
                query_id: set.query_id.clone(),
                lists,
                n,
                o,
                seed: query_seed(config.sampler.seed, &set.query_id),
                padded,
            }
        })
        .collect();
    if let Some(stray) = grouped.keys().next() {
        return Err(StageError::Integrity(format!(
            "plan contains lists for unknown query `{stray}`"
        )));
    }
    Ok(plans)
}

fn build_request<'a>(vocab: &'a Vocabulary, query: &'a Query, list: &'a SampleList) -> StageResult<RankRequest<'a>> {
    let resolve = |id: &EntityId| {
        vocab
            .get(id)
            .ok_or_else(|| StageError::Integrity(format!("list `{}` names unknown entity `{id}`", list.list_id)))
    };
    Ok(RankRequest {
        query,
        seeds: query.seeds.iter().map(resolve).collect::<Result<_, _>>()?,
        list,
        members: list.members.iter().map(resolve).collect::<Result<_, _>>()?,
    })
}

type Sink<'s> = dyn Fn(&RankRequest<'_>, RankOutcome) -> StageResult<()> + Sync + 's;

/// Ranks `requests` on up to `max_in_flight` threads. The first error stops
/// further dispatch; calls already in flight finish and are recorded.
fn rank_requests(
    ranker: &dyn Ranker,
    requests: &[RankRequest<'_>],
    max_in_flight: usize,
    sink: &Sink<'_>,
) -> StageResult<()> {
    let next = AtomicUsize::new(0);
    let finished = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<StageError>> = Mutex::new(None);
    let workers = max_in_flight.min(requests.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                while !stop.load(Ordering::Relaxed) {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(request) = requests.get(i) else { break };
                    let result = ranker
                        .rank(request)
                        .map_err(StageError::from)
                        .and_then(|outcome| sink(request, outcome));
                    if let Err(e) = result {
                        stop.store(true, Ordering::Relaxed);
                        failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                        break;
                    }
                    let done = finished.fetch_add(1, Ordering::Relaxed) + 1;
                    if done.is_multiple_of(100) || done == requests.len() {
                        info!("ranked {done}/{} lists", requests.len());
                    }
                }
            });
        }
    });
    match failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Serves rankings only from existing transcripts; any list that reaches it
/// has none.
#[derive(Debug, Clone, Copy)]
pub struct ReplayRanker {
    pub kind: RankerKind,
}

impl Ranker for ReplayRanker {
    fn kind(&self) -> RankerKind {
        self.kind
    }

    fn rank(&self, request: &RankRequest<'_>) -> Result<RankOutcome, RankError> {
        Err(RankError::MissingTranscript(request.list.list_id.clone()))
    }
}

/// Starts a new run in a timestamped directory.
pub fn run_expand(config: RunConfig, ranker: &dyn Ranker) -> Result<RunManifest, PipelineError> {
    Workspace::create(config)?.run(ranker)
}

/// Continues a run in `run_dir` with the configuration it was started with.
pub fn resume(run_dir: &Path, ranker: &dyn Ranker) -> Result<RunManifest, PipelineError> {
    let config = load_run_config(run_dir)?;
    Workspace::open(config, run_dir)?.run(ranker)
}

/// Recomputes results and metrics of a finished run from its transcripts
/// without calling any ranker.
pub fn replay(run_dir: &Path) -> Result<RunManifest, PipelineError> {
    let config = load_run_config(run_dir)?;
    let ranker = ReplayRanker {
        kind: config.ranker.kind(),
    };
    Workspace::open(config, run_dir)?.run(&ranker)
}

pub fn load_run_config(run_dir: &Path) -> Result<RunConfig, PipelineError> {
    let manifest = run_dir.join(MANIFEST_FILE);
    let path = if manifest.exists() {
        manifest
    } else {
        run_dir.join(CONFIG_FILE)
    };
    let text = fs::read_to_string(&path).map_err(|source| ConfigError::Read {
        path: path.clone(),
        source,
    })?;
    if path.ends_with(MANIFEST_FILE) {
        let manifest: RunManifest = serde_json::from_str(&text).map_err(ConfigError::from)?;
        Ok(manifest.config)
    } else {
        Ok(RunConfig::from_json(&text)?)
    }
}

/// Reference order for a candidate set: ground-truth members by their
/// ground-truth rank, then the rest by id.
pub fn truth_order(set: &CandidateSet<f64>, query: &Query) -> Option<Vec<EntityId>> {
    let truth = query.ground_truth.as_ref()?;
    let rank: HashMap<&EntityId, usize> = truth.iter().enumerate().map(|(i, id)| (id, i)).collect();
    let mut order: Vec<EntityId> = set.ids().cloned().collect();
    order.sort_by(|a, b| {
        let ka = rank.get(a).copied().unwrap_or(usize::MAX);
        let kb = rank.get(b).copied().unwrap_or(usize::MAX);
        ka.cmp(&kb).then_with(|| a.cmp(b))
    });
    Some(order)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub ns: Vec<usize>,
    pub os: Vec<usize>,
    /// Independent plan seeds per cell; cell values are means over them.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub n: usize,
    pub o: usize,
    /// Some query needed padding at this (n, o).
    pub padded: bool,
    pub lists: usize,
    pub runs: usize,
    pub mean_kendall_tau: Option<f64>,
    pub map: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ks: Vec<usize>,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, n: usize, o: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.n == n && c.o == o)
    }

    /// One row per cell; padded cells are marked with `*`.
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = write!(out, "{:>4}{:>5}{:>8}{:>9}", "n", "o", "lists", "tau");
        for k in &self.ks {
            let _ = write!(out, "{:>9}", format!("MAP@{k}"));
        }
        out.push('\n');
        for cell in &self.cells {
            let mark = if cell.padded { "*" } else { " " };
            let _ = write!(out, "{:>4}{:>4}{mark}{:>8}", cell.n, cell.o, cell.lists);
            if let Some(e) = &cell.error {
                let _ = writeln!(out, "  failed: {e}");
                continue;
            }
            match cell.mean_kendall_tau {
                Some(t) => {
                    let _ = write!(out, "{t:>9.4}");
                }
                None => {
                    let _ = write!(out, "{:>9}", "-");
                }
            }
            for k in &self.ks {
                match cell.map.get(k) {
                    Some(v) => {
                        let _ = write!(out, "{:>9.2}", v * 100.0);
                    }
                    None => {
                        let _ = write!(out, "{:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Seed for one ablation cell, derived from the base seed and the cell.
pub fn cell_seed(seed: u64, n: usize, o: usize, repeat: usize) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update((n as u64).to_le_bytes())
        .chain_update((o as u64).to_le_bytes())
        .chain_update((repeat as u64).to_le_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// The run configuration used for one cell of an ablation grid.
pub fn cell_config(config: &RunConfig, n: usize, o: usize, repeat: usize) -> RunConfig {
    let mut cell = config.clone();
    cell.sampler.n = n;
    cell.sampler.o = o;
    cell.sampler.seed = cell_seed(config.sampler.seed, n, o, repeat);
    cell
}

/// Runs every (n, o) cell of the grid as a full run in its own directory
/// under `<output_dir>/ablate-<timestamp>/`. A failing cell is recorded and
/// the grid continues.
pub fn run_ablation(
    config: &RunConfig,
    grid: &AblationGrid,
    ranker: &dyn Ranker,
) -> Result<AblationReport, PipelineError> {
    config.validate()?;
    if grid.ns.is_empty() || grid.os.is_empty() || grid.repeats == 0 {
        return Err(
            ConfigError::Invalid("ablation grid needs n values, o values and at least one repeat".into()).into(),
        );
    }
    if ranker.kind() == RankerKind::RemoteChat {
        warn!(
            "ablating with a remote ranker: {} full runs, each issuing its own ranking calls",
            grid.ns.len() * grid.os.len() * grid.repeats
        );
    }
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let root = config.paths.output_dir.join(format!("ablate-{stamp}"));
    let mut cells = Vec::new();
    for &n in &grid.ns {
        for &o in &grid.os {
            let cell = ablation_cell(config, grid.repeats, n, o, &root, ranker);
            if let Some(e) = &cell.error {
                warn!("ablation cell n={n} o={o} failed: {e}");
            }
            cells.push(cell);
        }
    }
    let report = AblationReport {
        ks: config.metrics.ks.clone(),
        cells,
    };
    let fail = |source| PipelineError::Stage {
        stage: Stage::Eval,
        checkpoint: None,
        source,
    };
    fs::create_dir_all(&root).map_err(|e| fail(io_err(&root)(e)))?;
    write_json(&root.join("ablation.json"), &report).map_err(fail)?;
    Ok(report)
}

fn ablation_cell(
    config: &RunConfig,
    repeats: usize,
    n: usize,
    o: usize,
    root: &Path,
    ranker: &dyn Ranker,
) -> AblationCell {
    let mut cell = AblationCell {
        n,
        o,
        padded: false,
        lists: 0,
        runs: 0,
        mean_kendall_tau: None,
        map: BTreeMap::new(),
        error: None,
    };
    let mut taus = Vec::new();
    let mut maps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for repeat in 0..repeats {
        let dir = root.join(format!("n{n}-o{o}-r{repeat}"));
        let output = Workspace::open(cell_config(config, n, o, repeat), &dir).and_then(|ws| ws.run_detailed(ranker));
        let output = match output {
            Ok(output) => output,
            Err(e) => {
                cell.error = Some(e.to_string());
                return cell;
            }
        };
        cell.padded |= output.manifest.queries.iter().any(|q| q.padded > 0);
        cell.lists += output.manifest.lists as usize;
        taus.extend(output.kendall_taus);
        if let Some(report) = output.report {
            for (k, v) in report.combined.map {
                maps.entry(k).or_default().push(v);
            }
        }
        cell.runs += 1;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    if !taus.is_empty() {
        cell.mean_kendall_tau = Some(mean(&taus));
    }
    cell.map = maps.iter().map(|(k, v)| (*k, mean(v))).collect();
    cell
}
