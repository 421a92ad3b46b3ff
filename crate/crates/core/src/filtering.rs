//! Filter score tables and confidence-threshold routing.
//!
//! Score wire format, one record per line:
//!
//! ```text
//! {"sample_id":"s1#0","sentence_id":"s1","unit":{"kind":"entity","span":[0,1]},
//!  "probs":{"None":0.1,"ORG":0.2,"PER":0.7}}
//! ```
//!
//! Every record must sum to 1 within ±1e-3, probabilities are non-negative
//! and keys are schema labels or `None`. Absent labels have probability 0.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, LabelSchema, Unit, NONE_LABEL};
use crate::metrics::{self, MetricsError, Prediction};

pub const SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed score record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("sample {sample_id:?}: probabilities sum to {sum}, outside 1 ± 1e-3")]
    BadDistribution { sample_id: String, sum: f64 },
    #[error("sample {sample_id:?}: invalid probability {value} for {label:?}")]
    BadProbability {
        sample_id: String,
        label: String,
        value: f64,
    },
    #[error("sample {sample_id:?}: unknown label {label:?}")]
    UnknownLabel { sample_id: String, label: String },
    #[error("sample {sample_id:?}: unit kind {kind} does not match the schema task")]
    WrongKind { sample_id: String, kind: &'static str },
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("score tables cover different samples ({0})")]
    SampleMismatch(String),
    #[error("score tables use different label schemas")]
    SchemaMismatch,
    #[error("ensemble needs at least two tables, got {0}")]
    NotEnoughTables(usize),
    #[error("sample {0:?} missing from score table")]
    MissingSample(String),
    #[error("validation score table is empty")]
    EmptyValidation,
    #[error("invalid router config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;

/// One filter output: a label distribution for a single unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub sentence_id: String,
    pub unit: Unit,
    pub probs: BTreeMap<String, f64>,
}

impl ScoreRecord {
    pub fn prob(&self, label: &str) -> f64 {
        self.probs.get(label).copied().unwrap_or(0.0)
    }

    fn validate(&self, schema: &LabelSchema) -> Result<()> {
        if !self.unit.matches_task(schema.task()) {
            return Err(FilterError::WrongKind {
                sample_id: self.sample_id.clone(),
                kind: self.unit.kind(),
            });
        }
        let mut sum = 0.0;
        for (label, &p) in &self.probs {
            if !schema.accepts(label) {
                return Err(FilterError::UnknownLabel {
                    sample_id: self.sample_id.clone(),
                    label: label.clone(),
                });
            }
            if !p.is_finite() || p < 0.0 {
                return Err(FilterError::BadProbability {
                    sample_id: self.sample_id.clone(),
                    label: label.clone(),
                    value: p,
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(FilterError::BadDistribution {
                sample_id: self.sample_id.clone(),
                sum,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub schema: LabelSchema,
    /// Keyed and iterated by sample id.
    pub records: BTreeMap<String, ScoreRecord>,
    pub provenance: String,
}

impl ScoreTable {
    pub fn new(
        schema: LabelSchema,
        records: impl IntoIterator<Item = ScoreRecord>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            r.validate(&schema)?;
            if map.contains_key(&r.sample_id) {
                return Err(FilterError::DuplicateSample(r.sample_id));
            }
            map.insert(r.sample_id.clone(), r);
        }
        Ok(Self {
            schema,
            records: map,
            provenance: provenance.into(),
        })
    }

    pub fn read(reader: impl BufRead, schema: &LabelSchema, provenance: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| FilterError::Io {
                path: PathBuf::new(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScoreRecord =
                serde_json::from_str(&line).map_err(|e| FilterError::Malformed {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            rec.validate(schema)?;
            if map.contains_key(&rec.sample_id) {
                return Err(FilterError::DuplicateSample(rec.sample_id));
            }
            map.insert(rec.sample_id.clone(), rec);
        }
        Ok(Self {
            schema: schema.clone(),
            records: map,
            provenance: provenance.to_string(),
        })
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in self.records.values() {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| FilterError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn get(&self, sample_id: &str) -> Option<&ScoreRecord> {
        self.records.get(sample_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Filter argmax for every record, in sample-id order.
    pub fn predictions(&self) -> Vec<Prediction> {
        self.records
            .values()
            .map(|r| Prediction {
                sample_id: r.sample_id.clone(),
                sentence_id: r.sentence_id.clone(),
                unit: r.unit.clone(),
                label: filter_argmax(r, &self.schema).to_string(),
                confidence: confidence(r),
            })
            .collect()
    }
}

/// Loads and validates a score file. Provenance defaults to the file stem.
pub fn ingest_scores(path: &Path, schema: &LabelSchema) -> Result<ScoreTable> {
    let file = File::open(path).map_err(|source| FilterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let provenance = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ScoreTable::read(BufReader::new(file), schema, &provenance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub tau: f64,
    pub top_n: usize,
    pub inject_none: bool,
    pub grid: Vec<f64>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            tau: 0.6,
            top_n: 3,
            inject_none: true,
            grid: default_grid(),
        }
    }
}

/// `0.05, 0.10, ..., 0.95`, each value the nearest double to `i/20`.
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|i| (i * 5) as f64 / 100.0).collect()
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(FilterError::InvalidConfig(format!(
                "tau {} outside [0,1]",
                self.tau
            )));
        }
        if self.top_n == 0 {
            return Err(FilterError::InvalidConfig("top_n must be at least 1".into()));
        }
        if self.grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(FilterError::InvalidConfig("grid values must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Highest probability over all labels, `None` included.
pub fn confidence(rec: &ScoreRecord) -> f64 {
    rec.probs.values().copied().fold(0.0, f64::max)
}

/// Easy iff the confidence strictly exceeds `tau`.
pub fn classify_difficulty(rec: &ScoreRecord, cfg: &RouterConfig) -> Difficulty {
    difficulty_at(confidence(rec), cfg.tau)
}

pub fn difficulty_at(conf: f64, tau: f64) -> Difficulty {
    if conf > tau {
        Difficulty::Easy
    } else {
        Difficulty::Hard
    }
}

fn by_prob_then_rank<'a>(
    rec: &ScoreRecord,
    schema: &LabelSchema,
    labels: impl Iterator<Item = &'a str>,
) -> Vec<&'a str> {
    let mut v: Vec<&str> = labels.collect();
    v.sort_by(|a, b| {
        rec.prob(b)
            .total_cmp(&rec.prob(a))
            .then_with(|| schema.rank(a).cmp(&schema.rank(b)))
    });
    v
}

/// Most probable label; ties go to the earlier schema label, `None` last.
pub fn filter_argmax<'a>(rec: &ScoreRecord, schema: &'a LabelSchema) -> &'a str {
    by_prob_then_rank(rec, schema, schema.labels_with_none())[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub sample_id: String,
    pub candidates: Vec<String>,
    pub source_confidence: f64,
}

/// The `top_n` most probable labels with positive probability, followed by
/// `None` when `inject_none` is set and it is not already among them.
pub fn top_candidates(rec: &ScoreRecord, cfg: &RouterConfig, schema: &LabelSchema) -> CandidateSet {
    let positive = schema.labels_with_none().filter(|l| rec.prob(l) > 0.0);
    let mut candidates: Vec<String> = by_prob_then_rank(rec, schema, positive)
        .into_iter()
        .take(cfg.top_n)
        .map(str::to_string)
        .collect();
    if cfg.inject_none && !candidates.iter().any(|c| c == NONE_LABEL) {
        candidates.push(NONE_LABEL.to_string());
    }
    CandidateSet {
        sample_id: rec.sample_id.clone(),
        candidates,
        source_confidence: confidence(rec),
    }
}

/// Every schema label plus `None`, ordered like [`top_candidates`]. Used when
/// label filtering is switched off.
pub fn all_candidates(rec: &ScoreRecord, schema: &LabelSchema) -> CandidateSet {
    CandidateSet {
        sample_id: rec.sample_id.clone(),
        candidates: by_prob_then_rank(rec, schema, schema.labels_with_none())
            .into_iter()
            .map(str::to_string)
            .collect(),
        source_confidence: confidence(rec),
    }
}

/// Divides by the total when it drifts from 1 by more than 1e-9.
pub fn normalize(probs: &mut BTreeMap<String, f64>) {
    let sum: f64 = probs.values().sum();
    if sum > 0.0 && (sum - 1.0).abs() > 1e-9 {
        for p in probs.values_mut() {
            *p /= sum;
        }
    }
}

/// Per-sample mean of the tables' distributions.
pub fn ensemble(tables: &[ScoreTable]) -> Result<ScoreTable> {
    if tables.len() < 2 {
        return Err(FilterError::NotEnoughTables(tables.len()));
    }
    let first = &tables[0];
    for t in &tables[1..] {
        if t.schema != first.schema {
            return Err(FilterError::SchemaMismatch);
        }
        if t.records.len() != first.records.len() {
            return Err(FilterError::SampleMismatch(format!(
                "{} has {} samples, {} has {}",
                first.provenance,
                first.len(),
                t.provenance,
                t.len()
            )));
        }
    }
    let n = tables.len() as f64;
    let mut out = BTreeMap::new();
    for (id, r0) in &first.records {
        let mut keys = BTreeSet::new();
        for t in tables {
            let r = t
                .get(id)
                .ok_or_else(|| FilterError::SampleMismatch(format!("{id:?} missing from {}", t.provenance)))?;
            if r.sentence_id != r0.sentence_id || r.unit != r0.unit {
                return Err(FilterError::SampleMismatch(format!(
                    "{id:?} refers to different units"
                )));
            }
            keys.extend(r.probs.keys().cloned());
        }
        let mut probs: BTreeMap<String, f64> = keys
            .into_iter()
            .map(|k| {
                let total: f64 = tables.iter().map(|t| t.records[id].prob(&k)).sum();
                (k, total / n)
            })
            .collect();
        normalize(&mut probs);
        out.insert(
            id.clone(),
            ScoreRecord {
                sample_id: id.clone(),
                sentence_id: r0.sentence_id.clone(),
                unit: r0.unit.clone(),
                probs,
            },
        );
    }
    Ok(ScoreTable {
        schema: first.schema.clone(),
        records: out,
        provenance: tables
            .iter()
            .map(|t| t.provenance.as_str())
            .collect::<Vec<_>>()
            .join("+"),
    })
}

/// Second-filter reranking: the candidate the other table scores highest,
/// ties to the earlier candidate.
pub fn slm_rerank(cands: &CandidateSet, other: &ScoreTable) -> Result<Prediction> {
    let rec = other
        .get(&cands.sample_id)
        .ok_or_else(|| FilterError::MissingSample(cands.sample_id.clone()))?;
    let mut best: Option<(&str, f64)> = None;
    for c in &cands.candidates {
        let p = rec.prob(c);
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((c, p));
        }
    }
    let label = best.map(|(l, _)| l).unwrap_or(NONE_LABEL);
    Ok(Prediction {
        sample_id: rec.sample_id.clone(),
        sentence_id: rec.sentence_id.clone(),
        unit: rec.unit.clone(),
        label: label.to_string(),
        confidence: cands.source_confidence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub f1: f64,
    pub hard: usize,
}

/// Simulated routing on a validation set for every grid threshold: Easy
/// samples keep the filter argmax, Hard samples take `rerank_fn`'s label.
/// `rerank_fn` is called at most once per sample.
pub fn threshold_sweep<F>(
    valid_scores: &ScoreTable,
    valid_gold: &Dataset,
    mut rerank_fn: F,
    cfg: &RouterConfig,
) -> Result<Vec<SweepPoint>>
where
    F: FnMut(&CandidateSet) -> String,
{
    if valid_scores.is_empty() {
        return Err(FilterError::EmptyValidation);
    }
    cfg.validate()?;
    let base = valid_scores.predictions();
    let mut reranked: HashMap<String, String> = HashMap::new();
    let mut grid = cfg.grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut out = Vec::with_capacity(grid.len());
    for tau in grid {
        let mut hard = 0;
        let preds: Vec<Prediction> = base
            .iter()
            .map(|p| {
                if difficulty_at(p.confidence, tau) == Difficulty::Easy {
                    return p.clone();
                }
                hard += 1;
                let label = reranked
                    .entry(p.sample_id.clone())
                    .or_insert_with(|| {
                        let rec = &valid_scores.records[&p.sample_id];
                        rerank_fn(&top_candidates(rec, cfg, &valid_scores.schema))
                    })
                    .clone();
                Prediction { label, ..p.clone() }
            })
            .collect();
        let f1 = metrics::micro_f1(&preds, valid_gold)?.f1;
        out.push(SweepPoint { tau, f1, hard });
    }
    Ok(out)
}

/// Threshold with the best validation F1. Ties go to the smaller threshold,
/// which routes fewer samples to the reranker.
pub fn tune_threshold<F>(
    valid_scores: &ScoreTable,
    valid_gold: &Dataset,
    rerank_fn: F,
    cfg: &RouterConfig,
) -> Result<f64>
where
    F: FnMut(&CandidateSet) -> String,
{
    let sweep = threshold_sweep(valid_scores, valid_gold, rerank_fn, cfg)?;
    Ok(best_point(&sweep).tau)
}

pub fn best_point(sweep: &[SweepPoint]) -> &SweepPoint {
    let mut best = &sweep[0];
    for p in &sweep[1..] {
        if p.f1 > best.f1 {
            best = p;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Span, Task};

    fn schema() -> LabelSchema {
        LabelSchema::new(Task::Ner, ["A", "B", "C", "D"]).unwrap()
    }

    fn rec(id: &str, probs: &[(&str, f64)]) -> ScoreRecord {
        ScoreRecord {
            sample_id: id.into(),
            sentence_id: "s".into(),
            unit: Unit::Entity { span: Span::new(0, 1) },
            probs: probs.iter().map(|(l, p)| (l.to_string(), *p)).collect(),
        }
    }

    #[test]
    fn accepts_valid_rejects_bad_sum() {
        let ok = rec("x", &[("A", 0.7), ("B", 0.2), ("None", 0.1)]);
        assert!(ScoreTable::new(schema(), [ok], "t").is_ok());
        let bad = rec("x", &[("A", 0.7), ("B", 0.2)]);
        assert!(matches!(
            ScoreTable::new(schema(), [bad], "t"),
            Err(FilterError::BadDistribution { .. })
        ));
        let unknown = rec("x", &[("Z", 1.0)]);
        assert!(matches!(
            ScoreTable::new(schema(), [unknown], "t"),
            Err(FilterError::UnknownLabel { .. })
        ));
        let neg = rec("x", &[("A", 1.5), ("B", -0.5)]);
        assert!(matches!(
            ScoreTable::new(schema(), [neg], "t"),
            Err(FilterError::BadProbability { .. })
        ));
        let dup = [rec("x", &[("A", 1.0)]), rec("x", &[("B", 1.0)])];
        assert!(matches!(
            ScoreTable::new(schema(), dup, "t"),
            Err(FilterError::DuplicateSample(_))
        ));
    }

    #[test]
    fn tolerance_edges() {
        assert!(ScoreTable::new(schema(), [rec("x", &[("A", 0.9995)])], "t").is_ok());
        assert!(ScoreTable::new(schema(), [rec("x", &[("A", 0.9985)])], "t").is_err());
    }

    #[test]
    fn confidence_is_max() {
        assert_eq!(confidence(&rec("x", &[("A", 0.7), ("B", 0.2), ("None", 0.1)])), 0.7);
        let uniform = rec("x", &[("A", 0.25), ("B", 0.25), ("C", 0.25), ("None", 0.25)]);
        assert_eq!(confidence(&uniform), 0.25);
    }

    #[test]
    fn difficulty_boundaries() {
        let cfg = |tau| RouterConfig { tau, ..Default::default() };
        assert_eq!(classify_difficulty(&rec("x", &[("A", 0.95), ("None", 0.05)]), &cfg(0.9)), Difficulty::Easy);
        assert_eq!(classify_difficulty(&rec("x", &[("A", 0.9), ("None", 0.1)]), &cfg(0.9)), Difficulty::Hard);
        assert_eq!(classify_difficulty(&rec("x", &[("A", 0.3), ("None", 0.7)]), &cfg(0.0)), Difficulty::Easy);
        assert_eq!(classify_difficulty(&rec("x", &[("A", 1.0)]), &cfg(1.0)), Difficulty::Hard);
    }

    #[test]
    fn candidates_order_and_none() {
        let cfg = RouterConfig::default();
        let r = rec("x", &[("A", 0.5), ("B", 0.3), ("C", 0.15), ("None", 0.05)]);
        assert_eq!(top_candidates(&r, &cfg, &schema()).candidates, ["A", "B", "C", "None"]);
        let r = rec("x", &[("None", 0.6), ("A", 0.4)]);
        assert_eq!(top_candidates(&r, &cfg, &schema()).candidates, ["None", "A"]);
        // ties resolved by schema order
        let r = rec("x", &[("C", 0.25), ("B", 0.25), ("D", 0.25), ("A", 0.25)]);
        let c = top_candidates(&r, &cfg, &schema());
        assert_eq!(c.candidates, ["A", "B", "C", "None"]);
        assert_eq!(c.source_confidence, 0.25);
        let no_inject = RouterConfig { inject_none: false, top_n: 1, ..Default::default() };
        assert_eq!(top_candidates(&r, &no_inject, &schema()).candidates, ["A"]);
    }

    #[test]
    fn all_candidates_lists_every_label() {
        let r = rec("x", &[("C", 0.6), ("None", 0.4)]);
        assert_eq!(all_candidates(&r, &schema()).candidates, ["C", "None", "A", "B", "D"]);
    }

    fn table(name: &str, recs: Vec<ScoreRecord>) -> ScoreTable {
        ScoreTable::new(schema(), recs, name).unwrap()
    }

    #[test]
    fn ensemble_mean() {
        let t1 = table("f1", vec![rec("x", &[("A", 1.0), ("None", 0.0)])]);
        let t2 = table("f2", vec![rec("x", &[("A", 0.0), ("None", 1.0)])]);
        let e = ensemble(&[t1.clone(), t2]).unwrap();
        assert_eq!(e.records["x"].prob("A"), 0.5);
        assert_eq!(e.records["x"].prob("None"), 0.5);
        assert_eq!(e.provenance, "f1+f2");
        let same = ensemble(&[t1.clone(), t1.clone()]).unwrap();
        assert_eq!(same.records, t1.records);
    }

    #[test]
    fn ensemble_errors() {
        let t1 = table("f1", vec![rec("x", &[("A", 1.0)])]);
        let t2 = table("f2", vec![rec("y", &[("A", 1.0)])]);
        assert!(matches!(ensemble(std::slice::from_ref(&t1)), Err(FilterError::NotEnoughTables(1))));
        assert!(matches!(ensemble(&[t1.clone(), t2]), Err(FilterError::SampleMismatch(_))));
        let other = ScoreTable::new(
            LabelSchema::new(Task::Ner, ["A"]).unwrap(),
            [rec("x", &[("A", 1.0)])],
            "f3",
        )
        .unwrap();
        assert!(matches!(ensemble(&[t1, other]), Err(FilterError::SchemaMismatch)));
    }

    #[test]
    fn slm_rerank_restricted_argmax() {
        let other = table("o", vec![rec("x", &[("A", 0.1), ("B", 0.3), ("D", 0.6)])]);
        let c = CandidateSet {
            sample_id: "x".into(),
            candidates: vec!["A".into(), "B".into(), "None".into()],
            source_confidence: 0.4,
        };
        assert_eq!(slm_rerank(&c, &other).unwrap().label, "B");
        let only_none = CandidateSet { candidates: vec!["None".into()], ..c.clone() };
        assert_eq!(slm_rerank(&only_none, &other).unwrap().label, "None");
        let missing = CandidateSet { sample_id: "nope".into(), ..c };
        assert!(matches!(slm_rerank(&missing, &other), Err(FilterError::MissingSample(_))));
    }

    #[test]
    fn grid_values_are_exact_decimals() {
        let g = default_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[11], 0.6);
        assert_eq!(g[18], 0.95);
    }
}
