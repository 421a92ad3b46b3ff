//! Micro-F1, head-F1 and confidence-bucket breakdowns.
//!
//! Matching is exact on `(sentence_id, unit, label)` and one-to-one: a gold
//! triple absorbs at most one prediction, so duplicated predictions become
//! false positives. Predictions labelled `None` are abstentions and never
//! count as false positives.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, SentenceRecord, Task, Unit, NONE_LABEL};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction references unknown sentence {0:?}")]
    UnknownSentence(String),
    #[error("head-F1 applies to EAE only, dataset task is {0}")]
    WrongTask(Task),
    #[error("bucket edges must be strictly increasing from 0 to 1: {0:?}")]
    BadEdges(Vec<f64>),
    #[error("sample {0:?} has no counterpart prediction")]
    UnpairedSample(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub sentence_id: String,
    pub unit: Unit,
    pub label: String,
    pub confidence: f64,
}

impl Prediction {
    pub fn is_none(&self) -> bool {
        self.label == NONE_LABEL
    }
}

/// True-positive / false-positive / false-negative tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR/(P+R)` evaluated as `2tp/(2tp+fp+fn)`, which is the same rational
    /// and rounds identically for equal ratios. `0/0` is 0.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Scores one sample whose gold and predicted labels are known.
    pub fn add_sample(&mut self, gold: &str, pred: &str) {
        let gold_pos = gold != NONE_LABEL;
        let pred_pos = pred != NONE_LABEL;
        if gold_pos && pred == gold {
            self.tp += 1;
            return;
        }
        if pred_pos {
            self.fp += 1;
        }
        if gold_pos {
            self.fn_ += 1;
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub before: Counts,
    pub after: Counts,
    pub f1_before: f64,
    pub f1_after: f64,
    pub negatives: usize,
    pub positives: usize,
    /// Gold `None` samples per gold positive; absent when there are no positives.
    pub neg_pos_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRow {
    pub f1_before_on_reranked: f64,
    pub f1_after_on_reranked: f64,
    pub reranked: usize,
    pub total: usize,
    /// Reranked samples over all samples (sample-level, not sentence-level).
    pub reranked_ratio: f64,
}

impl RerankRow {
    pub fn delta(&self) -> f64 {
        self.f1_after_on_reranked - self.f1_before_on_reranked
    }
}

/// Renders a fraction as a percentage with one decimal, e.g. `9.1%`.
pub fn format_ratio(r: f64) -> String {
    format!("{:.1}%", r * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(default)]
    pub bucket_rows: Vec<BucketRow>,
    #[serde(default)]
    pub rerank_rows: Option<RerankRow>,
}

impl EvalReport {
    pub fn from_counts(c: Counts) -> Self {
        Self {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            bucket_rows: Vec::new(),
            rerank_rows: None,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    /// Flat `name<TAB>value` lines, one metric per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}\t{v}");
        };
        put("precision", self.precision.to_string());
        put("recall", self.recall.to_string());
        put("f1", self.f1.to_string());
        put("tp", self.tp.to_string());
        put("fp", self.fp.to_string());
        put("fn", self.fn_.to_string());
        for (i, b) in self.bucket_rows.iter().enumerate() {
            put(&format!("bucket.{i}.lower"), b.lower.to_string());
            put(&format!("bucket.{i}.upper"), b.upper.to_string());
            put(&format!("bucket.{i}.n"), b.n.to_string());
            put(&format!("bucket.{i}.f1_before"), b.f1_before.to_string());
            put(&format!("bucket.{i}.f1_after"), b.f1_after.to_string());
            put(
                &format!("bucket.{i}.neg_pos_ratio"),
                b.neg_pos_ratio.map_or_else(|| "NA".into(), |r| r.to_string()),
            );
        }
        if let Some(r) = &self.rerank_rows {
            put("rerank.f1_before", r.f1_before_on_reranked.to_string());
            put("rerank.f1_after", r.f1_after_on_reranked.to_string());
            put("rerank.delta", r.delta().to_string());
            put("rerank.reranked", r.reranked.to_string());
            put("rerank.total", r.total.to_string());
            put("rerank.ratio", format_ratio(r.reranked_ratio));
        }
        out
    }
}

fn check_sentences<'a>(
    preds: impl IntoIterator<Item = &'a Prediction>,
    index: &BTreeMap<&str, &SentenceRecord>,
) -> Result<()> {
    for p in preds {
        if !index.contains_key(p.sentence_id.as_str()) {
            return Err(MetricsError::UnknownSentence(p.sentence_id.clone()));
        }
    }
    Ok(())
}

/// Multiset intersection size of two keyed tallies.
fn match_counts<K: std::hash::Hash + Eq>(pred: HashMap<K, usize>, gold: &HashMap<K, usize>) -> usize {
    pred.iter()
        .map(|(k, &n)| n.min(gold.get(k).copied().unwrap_or(0)))
        .sum()
}

/// Micro precision/recall/F1 over exact `(sentence, unit, label)` triples.
pub fn micro_f1(preds: &[Prediction], gold: &Dataset) -> Result<EvalReport> {
    let index = gold.index();
    check_sentences(preds, &index)?;
    let mut gold_keys: HashMap<(&str, &Unit, &str), usize> = HashMap::new();
    for s in &gold.sentences {
        for a in &s.annotations {
            *gold_keys
                .entry((s.sentence_id.as_str(), &a.unit, a.label.as_str()))
                .or_default() += 1;
        }
    }
    let n_gold: usize = gold_keys.values().sum();
    let mut pred_keys: HashMap<(&str, &Unit, &str), usize> = HashMap::new();
    for p in preds.iter().filter(|p| !p.is_none()) {
        *pred_keys
            .entry((p.sentence_id.as_str(), &p.unit, p.label.as_str()))
            .or_default() += 1;
    }
    let n_pred: usize = pred_keys.values().sum();
    let tp = match_counts(pred_keys, &gold_keys);
    Ok(EvalReport::from_counts(Counts {
        tp,
        fp: n_pred - tp,
        fn_: n_gold - tp,
    }))
}

/// Which token of an argument span stands in for its head word.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRule {
    #[default]
    LastToken,
    FirstToken,
}

impl HeadRule {
    pub fn head(self, span: crate::corpus::Span) -> usize {
        match self {
            HeadRule::LastToken => span.last_token(),
            HeadRule::FirstToken => span.start,
        }
    }
}

/// Argument F1 where a prediction matches when sentence, event type, role and
/// head token agree.
pub fn head_f1(preds: &[Prediction], gold: &Dataset, rule: HeadRule) -> Result<EvalReport> {
    if gold.schema.task() != Task::Eae {
        return Err(MetricsError::WrongTask(gold.schema.task()));
    }
    let index = gold.index();
    check_sentences(preds, &index)?;
    let mut gold_keys: HashMap<(String, String, String, usize), usize> = HashMap::new();
    for s in &gold.sentences {
        for a in &s.annotations {
            if let Unit::Argument { event, span, .. } = &a.unit {
                *gold_keys
                    .entry((s.sentence_id.clone(), event.clone(), a.label.clone(), rule.head(*span)))
                    .or_default() += 1;
            }
        }
    }
    let n_gold: usize = gold_keys.values().sum();
    let mut pred_keys: HashMap<(String, String, String, usize), usize> = HashMap::new();
    for p in preds.iter().filter(|p| !p.is_none()) {
        if let Unit::Argument { event, span, .. } = &p.unit {
            *pred_keys
                .entry((p.sentence_id.clone(), event.clone(), p.label.clone(), rule.head(*span)))
                .or_default() += 1;
        }
    }
    let n_pred: usize = pred_keys.values().sum();
    let tp = match_counts(pred_keys, &gold_keys);
    Ok(EvalReport::from_counts(Counts {
        tp,
        fp: n_pred - tp,
        fn_: n_gold - tp,
    }))
}

/// Default edges: `[0, 0.6)`, `[0.6, 0.9)`, `[0.9, 1]`.
pub const DEFAULT_EDGES: [f64; 4] = [0.0, 0.6, 0.9, 1.0];

fn check_edges(edges: &[f64]) -> Result<()> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && *edges.last().unwrap() == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(MetricsError::BadEdges(edges.to_vec()))
    }
}

/// Bucket index for a confidence. Buckets are half-open `[lo, hi)` except the
/// last, which also holds `1.0`.
pub fn bucket_of(edges: &[f64], conf: f64) -> usize {
    let last = edges.len() - 2;
    (0..=last)
        .rev()
        .find(|&i| conf >= edges[i])
        .unwrap_or(0)
        .min(last)
}

/// Per-bucket sample-level scores before and after reranking. Samples are
/// bucketed by their *before* confidence and paired by `sample_id`.
pub fn confidence_buckets(
    before: &[Prediction],
    after: &[Prediction],
    gold: &Dataset,
    edges: &[f64],
) -> Result<Vec<BucketRow>> {
    check_edges(edges)?;
    let index = gold.index();
    check_sentences(before.iter().chain(after), &index)?;
    let after_by_id: HashMap<&str, &Prediction> =
        after.iter().map(|p| (p.sample_id.as_str(), p)).collect();

    let n_buckets = edges.len() - 1;
    let mut rows: Vec<BucketRow> = (0..n_buckets)
        .map(|i| BucketRow {
            lower: edges[i],
            upper: edges[i + 1],
            n: 0,
            before: Counts::default(),
            after: Counts::default(),
            f1_before: 0.0,
            f1_after: 0.0,
            negatives: 0,
            positives: 0,
            neg_pos_ratio: None,
        })
        .collect();

    for b in before {
        let a = after_by_id
            .get(b.sample_id.as_str())
            .ok_or_else(|| MetricsError::UnpairedSample(b.sample_id.clone()))?;
        let g = index[b.sentence_id.as_str()].gold_label(&b.unit);
        let row = &mut rows[bucket_of(edges, b.confidence)];
        row.n += 1;
        row.before.add_sample(g, &b.label);
        row.after.add_sample(g, &a.label);
        if g == NONE_LABEL {
            row.negatives += 1;
        } else {
            row.positives += 1;
        }
    }
    for r in &mut rows {
        r.f1_before = r.before.f1();
        r.f1_after = r.after.f1();
        r.neg_pos_ratio = (r.positives > 0).then(|| r.negatives as f64 / r.positives as f64);
    }
    Ok(rows)
}

/// Sample-level counts for `(gold, predicted)` label pairs.
pub fn sample_counts<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Counts {
    let mut c = Counts::default();
    for (g, p) in pairs {
        c.add_sample(g, p);
    }
    c
}
