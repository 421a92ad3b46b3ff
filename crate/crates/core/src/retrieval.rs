//! Demonstration selection: seeded random draws or nearest neighbours by
//! cosine similarity of precomputed sentence embeddings.
//!
//! Embedding file format: a `dim=<d>` header line, then one line per
//! sentence holding the id, a tab, and `d` whitespace-separated floats.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use thiserror::Error;

use crate::corpus::Dataset;
use crate::rng;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed embedding file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: vector for {id:?} has {found} values, expected {expected}")]
    DimMismatch {
        line: usize,
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("zero vector for {0:?}")]
    ZeroVector(String),
    #[error("duplicate embedding for {0:?}")]
    DuplicateId(String),
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("asked for {k} demos from a pool of {available}")]
    PoolTooSmall { k: usize, available: usize },
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

/// Sentence vectors keyed by id, immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(RetrievalError::Malformed {
                line: 1,
                reason: "dim must be positive".into(),
            });
        }
        for (id, v) in &vectors {
            if v.len() != dim {
                return Err(RetrievalError::DimMismatch {
                    line: 0,
                    id: id.clone(),
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(RetrievalError::ZeroVector(id.clone()));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read(file).map_err(|e| match e {
            RetrievalError::Io { source, .. } => RetrievalError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn read(reader: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let io = |source| RetrievalError::Io {
            path: PathBuf::new(),
            source,
        };
        let dim = loop {
            match lines.next() {
                None => {
                    return Err(RetrievalError::Malformed {
                        line: 1,
                        reason: "missing dim header".into(),
                    })
                }
                Some((i, line)) => {
                    let line = line.map_err(io)?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break line
                        .trim()
                        .strip_prefix("dim=")
                        .and_then(|d| d.parse::<usize>().ok())
                        .filter(|d| *d > 0)
                        .ok_or_else(|| RetrievalError::Malformed {
                            line: i + 1,
                            reason: format!("expected `dim=<d>` header, got {line:?}"),
                        })?;
                }
            }
        };
        let mut vectors = BTreeMap::new();
        for (i, line) in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| RetrievalError::Malformed {
                line: i + 1,
                reason: "expected `id<TAB>values`".into(),
            })?;
            let v = rest
                .split_whitespace()
                .map(|x| x.parse::<f64>().ok().filter(|f| f.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| RetrievalError::Malformed {
                    line: i + 1,
                    reason: "non-numeric value".into(),
                })?;
            if v.len() != dim {
                return Err(RetrievalError::DimMismatch {
                    line: i + 1,
                    id: id.to_string(),
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(RetrievalError::ZeroVector(id.to_string()));
            }
            if vectors.insert(id.to_string(), v).is_some() {
                return Err(RetrievalError::DuplicateId(id.to_string()));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "dim={}", self.dim)?;
        for (id, v) in &self.vectors {
            let mut line = String::new();
            for (j, x) in v.iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{x}");
            }
            writeln!(w, "{id}\t{line}")?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn cosine(&self, a: &str, b: &str) -> Result<f64> {
        let va = self.get(a).ok_or_else(|| RetrievalError::MissingEmbedding(a.into()))?;
        let vb = self.get(b).ok_or_else(|| RetrievalError::MissingEmbedding(b.into()))?;
        Ok(cosine(va, vb))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Seeded uniform draw of `k` distinct ids, in draw order.
pub fn select_random_ids(ids: &[String], k: usize, seed: u64) -> Result<Vec<String>> {
    if k > ids.len() {
        return Err(RetrievalError::PoolTooSmall {
            k,
            available: ids.len(),
        });
    }
    let mut rng = rng::seeded(seed, "demo-random");
    Ok(index::sample(&mut rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect())
}

pub fn select_random(pool: &Dataset, k: usize, seed: u64) -> Result<Vec<String>> {
    let ids: Vec<String> = pool.sentences.iter().map(|s| s.sentence_id.clone()).collect();
    select_random_ids(&ids, k, seed)
}

/// Top-`k` ids by cosine similarity to `test_id`, most similar first. Ties go
/// to the lexicographically smaller id; `test_id` never ranks against itself.
pub fn rank_by_embedding<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    test_id: &str,
    emb: &EmbeddingTable,
    k: usize,
) -> Result<Vec<String>> {
    let query = emb
        .get(test_id)
        .ok_or_else(|| RetrievalError::MissingEmbedding(test_id.into()))?;
    let mut scored: Vec<(f64, &str)> = Vec::new();
    for id in ids {
        if id == test_id {
            continue;
        }
        let v = emb
            .get(id)
            .ok_or_else(|| RetrievalError::MissingEmbedding(id.into()))?;
        scored.push((cosine(query, v), id));
    }
    if k > scored.len() {
        return Err(RetrievalError::PoolTooSmall {
            k,
            available: scored.len(),
        });
    }
    scored.sort_by(|a, b| match b.0.total_cmp(&a.0) {
        Ordering::Equal => a.1.cmp(b.1),
        o => o,
    });
    scored.dedup_by(|a, b| a.1 == b.1);
    Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
}

pub fn select_by_embedding(
    pool: &Dataset,
    test_id: &str,
    emb: &EmbeddingTable,
    k: usize,
) -> Result<Vec<String>> {
    rank_by_embedding(
        pool.sentences.iter().map(|s| s.sentence_id.as_str()),
        test_id,
        emb,
        k,
    )
}
