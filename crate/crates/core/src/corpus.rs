//! Entity vocabulary and query datasets.
//!
//! Both files are JSON Lines. A vocabulary record looks like
//! `{"id": "e1", "surface": "New York", "images": ["img/ny.jpg"]}` and a query
//! record like `{"query_id": "q1", "seeds": ["e1", "e2", "e3"],
//! "class_name": "us cities", "ground_truth": ["e1", "e2", "e3", "e4"]}`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid entity: {0}")]
    InvalidEntity(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("entities `{first}` and `{second}` tokenize identically")]
    DuplicateEntity { first: EntityId, second: EntityId },
    #[error("entity id `{0}` appears more than once")]
    DuplicateId(EntityId),
    #[error("query `{query}`: unresolved entity id `{id}`")]
    UnresolvedId { query: String, id: EntityId },
    #[error("query `{query}`: seed set has {size} entities, expected 3 or 5")]
    SeedSetSize { query: String, size: usize },
    #[error("query `{query}`: seed `{seed}` is not part of the ground truth")]
    SeedOutsideTruth { query: String, seed: EntityId },
    #[error("duplicate query id `{0}`")]
    DuplicateQuery(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Opaque, stable entity identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Lowercase, then split on every character that is not alphanumeric.
pub fn tokenize(surface: &str) -> Result<Vec<String>, CorpusError> {
    let lowered = surface.trim().to_lowercase();
    let tokens: Vec<String> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect();
    if tokens.is_empty() {
        return Err(CorpusError::InvalidEntity(format!("surface {surface:?} has no tokens")));
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    pub surface: String,
    pub tokens: Vec<String>,
    /// Attachment references (paths or URIs), never decoded here.
    pub images: Vec<String>,
}

impl Entity {
    pub fn new(id: impl Into<String>, surface: impl Into<String>) -> Result<Self, CorpusError> {
        let surface = surface.into();
        let tokens = tokenize(&surface)?;
        Ok(Self {
            id: EntityId(id.into()),
            surface,
            tokens,
            images: Vec::new(),
        })
    }

    pub fn with_images(mut self, images: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.images = images.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntityRecord {
    id: String,
    surface: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    images: Vec<String>,
}

/// Validated, immutable entity vocabulary.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entities: Vec<Entity>,
    by_id: HashMap<EntityId, usize>,
    token_alphabet: BTreeSet<String>,
}

impl Vocabulary {
    pub fn from_entities(entities: Vec<Entity>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(entities.len());
        let mut by_tokens: HashMap<&[String], &EntityId> = HashMap::with_capacity(entities.len());
        let mut token_alphabet = BTreeSet::new();
        for (idx, entity) in entities.iter().enumerate() {
            if entity.tokens.is_empty() || entity.tokens.iter().any(String::is_empty) {
                return Err(CorpusError::InvalidEntity(format!(
                    "entity `{}` has an empty token",
                    entity.id
                )));
            }
            if by_id.insert(entity.id.clone(), idx).is_some() {
                return Err(CorpusError::DuplicateId(entity.id.clone()));
            }
            if let Some(first) = by_tokens.insert(&entity.tokens, &entity.id) {
                return Err(CorpusError::DuplicateEntity {
                    first: first.clone(),
                    second: entity.id.clone(),
                });
            }
            token_alphabet.extend(entity.tokens.iter().cloned());
        }
        Ok(Self {
            entities,
            by_id,
            token_alphabet,
        })
    }

    pub fn parse_jsonl(text: &str, origin: &Path) -> Result<Self, CorpusError> {
        let mut entities = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| CorpusError::Parse {
                path: origin.to_path_buf(),
                line: line_no + 1,
                message,
            };
            let record: EntityRecord =
                serde_json::from_str(line).map_err(|e| parse_err(format!("{e} in record {line}")))?;
            let tokens = tokenize(&record.surface).map_err(|e| parse_err(e.to_string()))?;
            entities.push(Entity {
                id: EntityId(record.id),
                surface: record.surface,
                tokens,
                images: record.images,
            });
        }
        Self::from_entities(entities)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = read(path)?;
        Self::parse_jsonl(&text, path)
    }

    /// Serializes back to the JSON Lines format accepted by [`Vocabulary::load`].
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entity in &self.entities {
            let record = EntityRecord {
                id: entity.id.0.clone(),
                surface: entity.surface.clone(),
                images: entity.images.clone(),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn get(&self, id: &EntityId) -> Option<&Entity> {
        self.by_id.get(id).map(|&i| &self.entities[i])
    }

    pub fn contains(&self, id: &EntityId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn token_alphabet(&self) -> &BTreeSet<String> {
        &self.token_alphabet
    }
}

/// Seed set plus, in evaluation mode, the target class members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub seeds: Vec<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<EntityId>>,
}

impl Query {
    /// Checks the query against a vocabulary.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), CorpusError> {
        let size = self.seeds.len();
        if size != 3 && size != 5 {
            return Err(CorpusError::SeedSetSize {
                query: self.query_id.clone(),
                size,
            });
        }
        let ids = self.seeds.iter().chain(self.ground_truth.iter().flatten());
        for id in ids {
            if !vocab.contains(id) {
                return Err(CorpusError::UnresolvedId {
                    query: self.query_id.clone(),
                    id: id.clone(),
                });
            }
        }
        if let Some(truth) = &self.ground_truth {
            let truth: HashSet<&EntityId> = truth.iter().collect();
            if let Some(seed) = self.seeds.iter().find(|s| !truth.contains(s)) {
                return Err(CorpusError::SeedOutsideTruth {
                    query: self.query_id.clone(),
                    seed: seed.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn seed_size(&self) -> usize {
        self.seeds.len()
    }
}

pub fn parse_queries(text: &str, origin: &Path, vocab: &Vocabulary) -> Result<Vec<Query>, CorpusError> {
    let mut queries = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let query: Query = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: origin.to_path_buf(),
            line: line_no + 1,
            message: format!("{e} in record {line}"),
        })?;
        query.validate(vocab)?;
        if !seen.insert(query.query_id.clone()) {
            return Err(CorpusError::DuplicateQuery(query.query_id));
        }
        queries.push(query);
    }
    Ok(queries)
}

pub fn load_queries(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<Query>, CorpusError> {
    let path = path.as_ref();
    let text = read(path)?;
    parse_queries(&text, path, vocab)
}

/// Splits queries into (three-seed, five-seed) groups, preserving order.
pub fn partition_by_seed_size(queries: &[Query]) -> (Vec<&Query>, Vec<&Query>) {
    queries.iter().partition(|q| q.seed_size() == 3)
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}
