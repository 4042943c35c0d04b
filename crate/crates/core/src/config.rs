//! Run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::aggregator::DegradedPolicy;
use crate::metrics::MetricsConfig;
use crate::ranker::RankerConfig;
use crate::sampler::{DEFAULT_LIST_LEN, DEFAULT_OCCURRENCES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("override key `{0}` does not name a config field")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub vocab: PathBuf,
    pub queries: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            vocab: "vocab.jsonl".into(),
            queries: "queries.jsonl".into(),
            output_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub width: usize,
    pub num_candidates: usize,
    pub include_seeds: bool,
    /// Weight multiplier for tokens shared with the seeds in the built-in scorer.
    pub overlap_boost: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 5,
            num_candidates: 100,
            include_seeds: false,
            overlap_boost: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n: usize,
    pub o: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_LIST_LEN,
            o: DEFAULT_OCCURRENCES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub decoder: DecoderConfig,
    pub sampler: SamplerConfig,
    pub ranker: RankerConfig,
    pub metrics: MetricsConfig,
    pub degraded_lists: DegradedPolicy,
    pub max_in_flight: usize,
    /// Fraction of degraded lists above which a run is reported as failing.
    pub degraded_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            decoder: DecoderConfig::default(),
            sampler: SamplerConfig::default(),
            ranker: RankerConfig::default(),
            metrics: MetricsConfig::default(),
            degraded_lists: DegradedPolicy::default(),
            max_in_flight: 4,
            degraded_threshold: 0.25,
        }
    }
}

fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Applies `key.path=value`; the value is parsed as JSON, else taken as a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(assignment.to_owned()))?;
        let key = key.trim();
        let mut tree = serde_json::to_value(&*self)?;
        let mut cursor = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let object = cursor
                .as_object_mut()
                .ok_or_else(|| ConfigError::UnknownKey(key.to_owned()))?;
            let last = i + 1 == parts.len();
            // Tagged ranker variants may not serialize every optional field.
            if !object.contains_key(*part) && !(last && parts.first() == Some(&"ranker")) {
                return Err(ConfigError::UnknownKey(key.to_owned()));
            }
            if last {
                object.insert((*part).to_owned(), parse_override_value(raw.trim()));
                break;
            }
            cursor = object.get_mut(*part).expect("checked");
        }
        *self = serde_json::from_value(tree)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.decoder.width == 0 {
            return invalid("decoder.width must be positive");
        }
        if self.decoder.num_candidates == 0 {
            return invalid("decoder.num_candidates must be positive");
        }
        if self.sampler.n < 2 {
            return invalid("sampler.n must be at least 2");
        }
        if self.sampler.o == 0 {
            return invalid("sampler.o must be positive");
        }
        if self.max_in_flight == 0 {
            return invalid("max_in_flight must be positive");
        }
        if self.metrics.ks.is_empty() || self.metrics.ks.contains(&0) {
            return invalid("metrics.ks must be non-empty positive cutoffs");
        }
        if !(0.0..=1.0).contains(&self.degraded_threshold) {
            return invalid("degraded_threshold must lie in [0, 1]");
        }
        self.ranker.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
