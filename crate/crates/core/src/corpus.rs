//! Unified dataset format and few-shot split construction.
//!
//! Every task shares one line-delimited JSON record:
//!
//! ```text
//! {"sentence_id":"s1","tokens":["Bob","works","at","Acme"],
//!  "annotations":[{"kind":"entity","span":[0,1],"label":"PER"}]}
//! ```
//!
//! Spans are token offsets, start inclusive and end exclusive, serialized as
//! `[start, end]`. The annotation `kind` is fixed by the task: `entity` (NER),
//! `trigger` (ED), `relation` with `subj`/`obj` spans (RE) and `argument` with
//! `trigger`, `event` and `span` (EAE, where `label` is the role).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Reserved label for "no structure here". Never part of [`LabelSchema::labels`].
pub const NONE_LABEL: &str = "None";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown label {label:?} (line {line})")]
    UnknownLabel { line: usize, label: String },
    #[error("span [{start},{end}) out of bounds for sentence {sentence_id} with {len} tokens (line {line})")]
    SpanOutOfBounds {
        line: usize,
        sentence_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("annotation kind {kind} does not match task {task} (line {line})")]
    WrongKind { line: usize, kind: &'static str, task: Task },
    #[error("duplicate sentence id {0:?}")]
    DuplicateSentence(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("label {label:?} has {available} occurrences, need at least {k}")]
    InsufficientSupport {
        label: String,
        available: usize,
        k: usize,
    },
    #[error("need {needed} negative sentences, only {available} available")]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("target {target} too small: covering every label takes {required} sentences")]
    TargetTooSmall { target: usize, required: usize },
    #[error("target {target} exceeds the {available} available sentences")]
    TargetTooLarge { target: usize, available: usize },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "EAE")]
    Eae,
}

impl Task {
    /// Annotation `kind` tag carried by units of this task.
    pub fn unit_kind(self) -> &'static str {
        match self {
            Task::Ner => "entity",
            Task::Re => "relation",
            Task::Ed => "trigger",
            Task::Eae => "argument",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ner => "NER",
            Task::Re => "RE",
            Task::Ed => "ED",
            Task::Eae => "EAE",
        })
    }
}

impl FromStr for Task {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NER" => Ok(Task::Ner),
            "RE" => Ok(Task::Re),
            "ED" => Ok(Task::Ed),
            "EAE" => Ok(Task::Eae),
            other => Err(CorpusError::InvalidSchema(format!("unknown task {other:?}"))),
        }
    }
}

/// Task kind plus the ordered label set. Label order is the global
/// tie-break order used by routing and candidate generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct LabelSchema {
    task: Task,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    task: Task,
    labels: Vec<String>,
}

impl TryFrom<RawSchema> for LabelSchema {
    type Error = CorpusError;

    fn try_from(raw: RawSchema) -> Result<Self> {
        LabelSchema::new(raw.task, raw.labels)
    }
}

impl From<LabelSchema> for RawSchema {
    fn from(s: LabelSchema) -> Self {
        RawSchema {
            task: s.task,
            labels: s.labels,
        }
    }
}

impl LabelSchema {
    pub fn new<S: Into<String>>(task: Task, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(CorpusError::InvalidSchema("empty label".into()));
            }
            if l == NONE_LABEL {
                return Err(CorpusError::InvalidSchema(format!(
                    "{NONE_LABEL:?} is reserved"
                )));
            }
            if !seen.insert(l.as_str()) {
                return Err(CorpusError::InvalidSchema(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { task, labels })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::InvalidSchema(e.to_string()))
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// True for schema labels and for `None`.
    pub fn accepts(&self, label: &str) -> bool {
        label == NONE_LABEL || self.contains(label)
    }

    /// Tie-break rank: schema labels in order, then `None`, then anything else.
    pub fn rank(&self, label: &str) -> usize {
        match self.labels.iter().position(|l| l == label) {
            Some(i) => i,
            None if label == NONE_LABEL => self.labels.len(),
            None => self.labels.len() + 1,
        }
    }

    /// Schema labels followed by `None`.
    pub fn labels_with_none(&self) -> impl Iterator<Item = &str> {
        self.labels
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(NONE_LABEL))
    }
}

/// Token span `[start, end)`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn last_token(&self) -> usize {
        self.end - 1
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// One scorable extraction unit without its label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Unit {
    Entity { span: Span },
    Trigger { span: Span },
    Relation { subj: Span, obj: Span },
    Argument { trigger: Span, event: String, span: Span },
}

impl Unit {
    pub fn kind(&self) -> &'static str {
        match self {
            Unit::Entity { .. } => "entity",
            Unit::Trigger { .. } => "trigger",
            Unit::Relation { .. } => "relation",
            Unit::Argument { .. } => "argument",
        }
    }

    pub fn spans(&self) -> Vec<Span> {
        match self {
            Unit::Entity { span } | Unit::Trigger { span } => vec![*span],
            Unit::Relation { subj, obj } => vec![*subj, *obj],
            Unit::Argument { trigger, span, .. } => vec![*trigger, *span],
        }
    }

    pub fn matches_task(&self, task: Task) -> bool {
        self.kind() == task.unit_kind()
    }

    /// Checks kind and span bounds against a sentence of `len` tokens.
    pub(crate) fn check(&self, task: Task, len: usize) -> std::result::Result<(), UnitIssue> {
        if !self.matches_task(task) {
            return Err(UnitIssue::WrongKind(self.kind()));
        }
        for s in self.spans() {
            if s.start >= s.end || s.end > len {
                return Err(UnitIssue::OutOfBounds(s));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub(crate) enum UnitIssue {
    WrongKind(&'static str),
    OutOfBounds(Span),
}

/// Gold annotation: a unit plus its label (the role label for EAE).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(flatten)]
    pub unit: Unit,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl SentenceRecord {
    pub fn is_negative(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Surface form of a span: its tokens joined by single spaces.
    pub fn surface(&self, span: Span) -> String {
        self.tokens[span.start..span.end].join(" ")
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Gold label of `unit`, or `None` when the unit is unannotated.
    pub fn gold_label(&self, unit: &Unit) -> &str {
        self.annotations
            .iter()
            .find(|a| &a.unit == unit)
            .map(|a| a.label.as_str())
            .unwrap_or(NONE_LABEL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: LabelSchema,
    pub sentences: Vec<SentenceRecord>,
    pub split_tag: SplitTag,
}

impl Dataset {
    /// Validates and builds a dataset. Duplicate annotations inside a
    /// sentence are dropped, keeping the first occurrence.
    pub fn new(schema: LabelSchema, sentences: Vec<SentenceRecord>, split_tag: SplitTag) -> Result<Self> {
        let mut sentences = sentences;
        let mut ids = HashSet::new();
        for (i, s) in sentences.iter_mut().enumerate() {
            validate_sentence(&schema, s, i + 1)?;
            if !ids.insert(s.sentence_id.clone()) {
                return Err(CorpusError::DuplicateSentence(s.sentence_id.clone()));
            }
        }
        Ok(Self {
            schema,
            sentences,
            split_tag,
        })
    }

    /// Reads the line-delimited record format. Blank lines are skipped; line
    /// numbers in errors are 1-based file lines.
    pub fn load(path: &Path, schema: &LabelSchema) -> Result<Self> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read(BufReader::new(file), schema).map_err(|e| match e {
            CorpusError::Io { source, .. } => CorpusError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn read(reader: impl BufRead, schema: &LabelSchema) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|source| CorpusError::Io {
                path: PathBuf::new(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: SentenceRecord =
                serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            validate_sentence(schema, &mut rec, line_no)?;
            if !ids.insert(rec.sentence_id.clone()) {
                return Err(CorpusError::DuplicateSentence(rec.sentence_id));
            }
            sentences.push(rec);
        }
        Ok(Self {
            schema: schema.clone(),
            sentences,
            split_tag: SplitTag::Full,
        })
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for s in &self.sentences {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.split_tag = tag;
        self
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentence(&self, id: &str) -> Option<&SentenceRecord> {
        self.sentences.iter().find(|s| s.sentence_id == id)
    }

    /// Index from sentence id to record.
    pub fn index(&self) -> BTreeMap<&str, &SentenceRecord> {
        self.sentences
            .iter()
            .map(|s| (s.sentence_id.as_str(), s))
            .collect()
    }

    /// Annotation count per schema label (zeros included).
    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.schema.labels().iter().map(|l| (l.clone(), 0)).collect();
        for s in &self.sentences {
            for a in &s.annotations {
                *counts.entry(a.label.clone()).or_default() += 1;
            }
        }
        counts
    }

    fn subset(&self, indices: impl IntoIterator<Item = usize>, tag: SplitTag) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            sentences: indices
                .into_iter()
                .map(|i| self.sentences[i].clone())
                .collect(),
            split_tag: tag,
        }
    }
}

fn validate_sentence(schema: &LabelSchema, rec: &mut SentenceRecord, line: usize) -> Result<()> {
    let len = rec.tokens.len();
    let mut seen = HashSet::new();
    let mut deduped = Vec::with_capacity(rec.annotations.len());
    for a in rec.annotations.drain(..) {
        match a.unit.check(schema.task(), len) {
            Ok(()) => {}
            Err(UnitIssue::WrongKind(kind)) => {
                return Err(CorpusError::WrongKind {
                    line,
                    kind,
                    task: schema.task(),
                })
            }
            Err(UnitIssue::OutOfBounds(s)) => {
                return Err(CorpusError::SpanOutOfBounds {
                    line,
                    sentence_id: rec.sentence_id.clone(),
                    start: s.start,
                    end: s.end,
                    len,
                })
            }
        }
        if !schema.contains(&a.label) {
            return Err(CorpusError::UnknownLabel {
                line,
                label: a.label,
            });
        }
        if seen.insert(a.clone()) {
            deduped.push(a);
        }
    }
    rec.annotations = deduped;
    Ok(())
}

/// Exact rational `num:den`, written `"1:1"` or `"1/10"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "ratio denominator must be positive");
        Self { num, den }
    }

    /// `floor(n * num / den)`
    pub fn floor_mul(&self, n: usize) -> usize {
        ((n as u128 * self.num as u128) / self.den as u128) as usize
    }
}

impl FromStr for Ratio {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CorpusError::InvalidConfig(format!("bad ratio {s:?}"));
        let (a, b) = s.split_once([':', '/']).ok_or_else(bad)?;
        let num = a.trim().parse().map_err(|_| bad())?;
        let den: u64 = b.trim().parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        Ok(Self { num, den })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k: usize,
    pub seed: u64,
    /// Negatives per positive sentence.
    pub negative_ratio: Ratio,
    pub valid_fraction: Ratio,
    pub valid_min_sentences: usize,
}

impl SamplerConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CorpusError::InvalidConfig("k must be at least 1".into()));
        }
        if self.valid_fraction.num > self.valid_fraction.den {
            return Err(CorpusError::InvalidConfig(
                "valid_fraction must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 1,
            seed: 0,
            negative_ratio: Ratio::new(1, 1),
            valid_fraction: Ratio::new(1, 10),
            valid_min_sentences: 300,
        }
    }
}

/// Intermediate state of the greedy sampler, exposed for replay checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KShotTrace {
    /// Label visiting order (ascending frequency, ties by name).
    pub label_order: Vec<String>,
    /// Indices into the full dataset, in draw order.
    pub drawn: Vec<usize>,
    /// Subset of `drawn` that survived the prune pass, in draw order.
    pub kept: Vec<usize>,
}

/// Greedy K-shot sampling. For RE every label gets exactly `k` sentences with
/// no prune pass; other tasks use greedy label covering followed by pruning.
pub fn greedy_kshot_sample(full: &Dataset, cfg: &SamplerConfig) -> Result<Dataset> {
    let trace = greedy_kshot_trace(full, cfg)?;
    Ok(full.subset(trace.kept, SplitTag::Train))
}

pub fn greedy_kshot_trace(full: &Dataset, cfg: &SamplerConfig) -> Result<KShotTrace> {
    cfg.validate()?;
    let k = cfg.k;
    let labels = full.schema.labels();
    let freq = full.label_counts();

    // Per-sentence annotation counts, indexed by label position.
    let label_pos: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let per_sentence: Vec<Vec<usize>> = full
        .sentences
        .iter()
        .map(|s| {
            let mut c = vec![0usize; labels.len()];
            for a in &s.annotations {
                c[label_pos[a.label.as_str()]] += 1;
            }
            c
        })
        .collect();

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        freq[&labels[a]]
            .cmp(&freq[&labels[b]])
            .then_with(|| labels[a].cmp(&labels[b]))
    });

    let is_re = full.schema.task() == Task::Re;
    for &li in &order {
        let available = if is_re {
            per_sentence.iter().filter(|c| c[li] > 0).count()
        } else {
            freq[&labels[li]]
        };
        if available < k {
            return Err(CorpusError::InsufficientSupport {
                label: labels[li].clone(),
                available,
                k,
            });
        }
    }

    let mut rng = rng::seeded(cfg.seed, "kshot");
    let mut taken = vec![false; full.sentences.len()];
    let mut counter = vec![0usize; labels.len()];
    let mut drawn = Vec::new();

    for &li in &order {
        let mut picked_for_label = 0usize;
        loop {
            let satisfied = if is_re {
                picked_for_label >= k
            } else {
                counter[li] >= k
            };
            if satisfied {
                break;
            }
            let candidates: Vec<usize> = (0..full.sentences.len())
                .filter(|&i| !taken[i] && per_sentence[i][li] > 0)
                .collect();
            if candidates.is_empty() {
                // Only reachable for RE when multi-relation sentences were
                // consumed by earlier labels.
                return Err(CorpusError::InsufficientSupport {
                    label: labels[li].clone(),
                    available: picked_for_label,
                    k,
                });
            }
            let pick = candidates[rng.gen_range(0..candidates.len())];
            taken[pick] = true;
            drawn.push(pick);
            picked_for_label += 1;
            for (c, n) in counter.iter_mut().zip(&per_sentence[pick]) {
                *c += n;
            }
        }
    }

    let kept = if is_re {
        drawn.clone()
    } else {
        let mut keep = Vec::with_capacity(drawn.len());
        for &s in &drawn {
            for (c, n) in counter.iter_mut().zip(&per_sentence[s]) {
                *c -= n;
            }
            if counter.iter().any(|&c| c < k) {
                for (c, n) in counter.iter_mut().zip(&per_sentence[s]) {
                    *c += n;
                }
                keep.push(s);
            }
        }
        keep
    };

    Ok(KShotTrace {
        label_order: order.iter().map(|&i| labels[i].clone()).collect(),
        drawn,
        kept,
    })
}

/// Appends seeded-random annotation-free sentences from `full` until the
/// negative:positive ratio reaches `cfg.negative_ratio` (rounded down).
pub fn balance_negatives(sampled: &Dataset, full: &Dataset, cfg: &SamplerConfig) -> Result<Dataset> {
    let positives = sampled.sentences.iter().filter(|s| !s.is_negative()).count();
    let current = sampled.len() - positives;
    let needed = cfg.negative_ratio.floor_mul(positives).saturating_sub(current);
    let mut out = sampled.clone();
    if needed == 0 {
        return Ok(out);
    }
    let present: HashSet<&str> = sampled
        .sentences
        .iter()
        .map(|s| s.sentence_id.as_str())
        .collect();
    let pool: Vec<&SentenceRecord> = full
        .sentences
        .iter()
        .filter(|s| s.is_negative() && !present.contains(s.sentence_id.as_str()))
        .collect();
    if pool.len() < needed {
        return Err(CorpusError::InsufficientNegatives {
            needed,
            available: pool.len(),
        });
    }
    let mut rng = rng::seeded(cfg.seed, "negatives");
    for i in index::sample(&mut rng, pool.len(), needed) {
        out.sentences.push(pool[i].clone());
    }
    Ok(out)
}

/// Splits off a seeded validation set when the dataset is larger than
/// `cfg.valid_min_sentences`; otherwise the validation set is empty and the
/// caller is expected to fall back to cross-validation. Both halves keep the
/// input order.
pub fn split_train_valid(sampled: &Dataset, cfg: &SamplerConfig) -> (Dataset, Dataset) {
    let n = sampled.len();
    if n <= cfg.valid_min_sentences {
        return (
            sampled.clone().with_tag(SplitTag::Train),
            sampled.subset([], SplitTag::Valid),
        );
    }
    let n_valid = cfg.valid_fraction.floor_mul(n);
    let mut rng = rng::seeded(cfg.seed, "valid-split");
    let mut is_valid = vec![false; n];
    for i in index::sample(&mut rng, n, n_valid) {
        is_valid[i] = true;
    }
    let train = sampled.subset((0..n).filter(|&i| !is_valid[i]), SplitTag::Train);
    let valid = sampled.subset((0..n).filter(|&i| is_valid[i]), SplitTag::Valid);
    (train, valid)
}

/// Seeded downsampling that keeps at least one occurrence of every label
/// present in `full_test`. Covering sentences are chosen first, rarest label
/// first; the remainder is filled uniformly. Output keeps the input order.
pub fn downsample_test(full_test: &Dataset, target: usize, seed: u64) -> Result<Dataset> {
    let n = full_test.len();
    if target > n {
        return Err(CorpusError::TargetTooLarge {
            target,
            available: n,
        });
    }
    let counts = full_test.label_counts();
    let mut present: Vec<(&String, usize)> = counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(l, &c)| (l, c))
        .collect();
    present.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let mut rng = rng::seeded(seed, "downsample");
    let mut chosen = vec![false; n];
    let mut n_chosen = 0usize;
    let mut covered: HashSet<&str> = HashSet::new();
    for (label, _) in present {
        if covered.contains(label.as_str()) {
            continue;
        }
        let candidates: Vec<usize> = (0..n)
            .filter(|&i| {
                !chosen[i]
                    && full_test.sentences[i]
                        .annotations
                        .iter()
                        .any(|a| &a.label == label)
            })
            .collect();
        let pick = candidates[rng.gen_range(0..candidates.len())];
        chosen[pick] = true;
        n_chosen += 1;
        for a in &full_test.sentences[pick].annotations {
            covered.insert(a.label.as_str());
        }
    }
    if n_chosen > target {
        return Err(CorpusError::TargetTooSmall {
            target,
            required: n_chosen,
        });
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
    for i in index::sample(&mut rng, rest.len(), target - n_chosen) {
        chosen[rest[i]] = true;
    }
    Ok(full_test.subset((0..n).filter(|&i| chosen[i]), SplitTag::Test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ner_schema(labels: &[&str]) -> LabelSchema {
        LabelSchema::new(Task::Ner, labels.iter().copied()).unwrap()
    }

    fn ent(start: usize, end: usize, label: &str) -> Annotation {
        Annotation {
            unit: Unit::Entity {
                span: Span::new(start, end),
            },
            label: label.into(),
        }
    }

    fn sent(id: &str, n_tokens: usize, anns: Vec<Annotation>) -> SentenceRecord {
        SentenceRecord {
            sentence_id: id.into(),
            tokens: (0..n_tokens).map(|i| format!("w{i}")).collect(),
            annotations: anns,
        }
    }

    fn ds(schema: &LabelSchema, sents: Vec<SentenceRecord>) -> Dataset {
        Dataset::new(schema.clone(), sents, SplitTag::Full).unwrap()
    }

    #[test]
    fn schema_rejects_none_and_duplicates() {
        assert!(LabelSchema::new(Task::Ner, ["PER", "None"]).is_err());
        assert!(LabelSchema::new(Task::Ner, ["PER", "PER"]).is_err());
        assert!(LabelSchema::new(Task::Ner, [""]).is_err());
        let s: LabelSchema = serde_json::from_str(r#"{"task":"ED","labels":["A","B"]}"#).unwrap();
        assert_eq!(s.task(), Task::Ed);
        assert!(serde_json::from_str::<LabelSchema>(r#"{"task":"ED","labels":["None"]}"#).is_err());
    }

    #[test]
    fn load_smallest_record() {
        let schema = ner_schema(&["PER"]);
        let line = r#"{"sentence_id":"s1","tokens":["Bob","runs"],"annotations":[{"kind":"entity","span":[0,1],"label":"PER"}]}"#;
        let d = Dataset::read(line.as_bytes(), &schema).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.sentences[0].annotations.len(), 1);
    }

    #[test]
    fn load_rejects_bad_records() {
        let schema = ner_schema(&["PER"]);
        let oob = r#"{"sentence_id":"s1","tokens":["Bob"],"annotations":[{"kind":"entity","span":[0,2],"label":"PER"}]}"#;
        assert!(matches!(
            Dataset::read(oob.as_bytes(), &schema),
            Err(CorpusError::SpanOutOfBounds { line: 1, end: 2, len: 1, .. })
        ));
        let unknown = r#"{"sentence_id":"s1","tokens":["Bob"],"annotations":[{"kind":"entity","span":[0,1],"label":"ORG"}]}"#;
        assert!(matches!(
            Dataset::read(unknown.as_bytes(), &schema),
            Err(CorpusError::UnknownLabel { .. })
        ));
        let garbage = "\n{\"sentence_id\": 3}";
        assert!(matches!(
            Dataset::read(garbage.as_bytes(), &schema),
            Err(CorpusError::MalformedRecord { line: 2, .. })
        ));
        let wrong = r#"{"sentence_id":"s1","tokens":["Bob"],"annotations":[{"kind":"trigger","span":[0,1],"label":"PER"}]}"#;
        assert!(matches!(
            Dataset::read(wrong.as_bytes(), &schema),
            Err(CorpusError::WrongKind { .. })
        ));
        let dup = "{\"sentence_id\":\"a\",\"tokens\":[\"x\"]}\n{\"sentence_id\":\"a\",\"tokens\":[\"y\"]}";
        assert!(matches!(
            Dataset::read(dup.as_bytes(), &schema),
            Err(CorpusError::DuplicateSentence(_))
        ));
    }

    #[test]
    fn fixture_label_counts_match_hand_count() {
        // PER x3, ORG x2, LOC x1 counted by hand over the three lines below.
        let text = concat!(
            r#"{"sentence_id":"a","tokens":["Bob","met","Ann","at","Acme"],"annotations":[{"kind":"entity","span":[0,1],"label":"PER"},{"kind":"entity","span":[2,3],"label":"PER"},{"kind":"entity","span":[4,5],"label":"ORG"}]}"#,
            "\n",
            r#"{"sentence_id":"b","tokens":["Paris","is","big"],"annotations":[{"kind":"entity","span":[0,1],"label":"LOC"}]}"#,
            "\n",
            r#"{"sentence_id":"c","tokens":["Eve","left","IBM"],"annotations":[{"kind":"entity","span":[0,1],"label":"PER"},{"kind":"entity","span":[2,3],"label":"ORG"}]}"#,
            "\n"
        );
        let d = Dataset::read(text.as_bytes(), &ner_schema(&["PER", "ORG", "LOC"])).unwrap();
        let c = d.label_counts();
        assert_eq!((c["PER"], c["ORG"], c["LOC"]), (3, 2, 1));
    }

    #[test]
    fn duplicate_gold_is_deduplicated() {
        let schema = ner_schema(&["PER"]);
        let d = ds(&schema, vec![sent("a", 2, vec![ent(0, 1, "PER"), ent(0, 1, "PER")])]);
        assert_eq!(d.sentences[0].annotations.len(), 1);
    }

    #[test]
    fn kshot_disjoint_exact() {
        let schema = ner_schema(&["A", "B"]);
        let sents = vec![
            sent("1", 2, vec![ent(0, 1, "A")]),
            sent("2", 2, vec![ent(0, 1, "A")]),
            sent("3", 2, vec![ent(0, 1, "B")]),
            sent("4", 2, vec![ent(0, 1, "B")]),
        ];
        let d = ds(&schema, sents);
        let out = greedy_kshot_sample(&d, &SamplerConfig::new(2, 7)).unwrap();
        let mut ids: Vec<_> = out.sentences.iter().map(|s| s.sentence_id.clone()).collect();
        ids.sort();
        assert_eq!(ids, ["1", "2", "3", "4"]);
        let c = out.label_counts();
        assert_eq!((c["A"], c["B"]), (2, 2));
    }

    #[test]
    fn kshot_single_sentence_cover() {
        let schema = ner_schema(&["A", "B", "C"]);
        let d = ds(
            &schema,
            vec![sent(
                "all",
                3,
                vec![ent(0, 1, "A"), ent(1, 2, "B"), ent(2, 3, "C")],
            )],
        );
        let out = greedy_kshot_sample(&d, &SamplerConfig::new(1, 0)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.sentences[0].sentence_id, "all");
    }

    #[test]
    fn kshot_rarest_label_drawn_first() {
        let schema = ner_schema(&["A", "B"]);
        let d = ds(
            &schema,
            vec![
                sent("a", 1, vec![ent(0, 1, "A")]),
                sent("ab", 2, vec![ent(0, 1, "A"), ent(1, 2, "B")]),
            ],
        );
        for seed in 0..20 {
            let t = greedy_kshot_trace(&d, &SamplerConfig::new(1, seed)).unwrap();
            assert_eq!(t.label_order, ["B", "A"]);
            assert_eq!(t.drawn, [1]);
            assert_eq!(t.kept, [1]);
        }
    }

    #[test]
    fn kshot_prune_drops_redundant_sentence() {
        // A (2 occurrences) is visited before B (3). Drawing "a" for A and
        // then "ab" for B makes "a" redundant.
        let schema = ner_schema(&["A", "B"]);
        let d = ds(
            &schema,
            vec![
                sent("a", 1, vec![ent(0, 1, "A")]),
                sent("ab", 2, vec![ent(0, 1, "A"), ent(1, 2, "B")]),
                sent("b", 1, vec![ent(0, 1, "B")]),
                sent("b2", 1, vec![ent(0, 1, "B")]),
            ],
        );
        let mut seen = false;
        for seed in 0..200 {
            let t = greedy_kshot_trace(&d, &SamplerConfig::new(1, seed)).unwrap();
            if t.drawn == [0, 1] {
                assert_eq!(t.kept, [1]);
                seen = true;
            }
        }
        assert!(seen, "no seed drew a then ab");
    }

    #[test]
    fn kshot_insufficient_support() {
        let schema = ner_schema(&["A", "B"]);
        let d = ds(&schema, vec![sent("1", 1, vec![ent(0, 1, "A")])]);
        match greedy_kshot_sample(&d, &SamplerConfig::new(1, 0)) {
            Err(CorpusError::InsufficientSupport { label, available, k }) => {
                assert_eq!((label.as_str(), available, k), ("B", 0, 1));
            }
            other => panic!("{other:?}"),
        }
        assert!(greedy_kshot_sample(&d, &SamplerConfig::new(0, 0)).is_err());
    }

    #[test]
    fn kshot_relation_exactly_k() {
        let schema = LabelSchema::new(Task::Re, ["r1", "r2"]).unwrap();
        let rel = |l: &str| Annotation {
            unit: Unit::Relation {
                subj: Span::new(0, 1),
                obj: Span::new(1, 2),
            },
            label: l.into(),
        };
        let sents: Vec<_> = (0..10)
            .map(|i| sent(&format!("s{i}"), 2, vec![rel(if i % 2 == 0 { "r1" } else { "r2" })]))
            .collect();
        let d = ds(&schema, sents);
        let out = greedy_kshot_sample(&d, &SamplerConfig::new(3, 11)).unwrap();
        assert_eq!(out.len(), 6);
        let c = out.label_counts();
        assert_eq!((c["r1"], c["r2"]), (3, 3));
    }

    fn pos_neg(n_pos: usize, n_neg: usize) -> (LabelSchema, Dataset) {
        let schema = ner_schema(&["A"]);
        let mut sents: Vec<_> = (0..n_pos)
            .map(|i| sent(&format!("p{i}"), 1, vec![ent(0, 1, "A")]))
            .collect();
        sents.extend((0..n_neg).map(|i| sent(&format!("n{i}"), 1, vec![])));
        let d = ds(&schema, sents);
        (schema, d)
    }

    #[test]
    fn balance_adds_exact_negatives() {
        let (schema, full) = pos_neg(10, 30);
        let sampled = ds(&schema, full.sentences[..10].to_vec());
        let out = balance_negatives(&sampled, &full, &SamplerConfig::new(1, 3)).unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(out.sentences[..10], sampled.sentences[..]);
        assert!(out.sentences[10..].iter().all(|s| s.is_negative()));
    }

    #[test]
    fn balance_zero_positives_is_identity() {
        let (schema, full) = pos_neg(0, 5);
        let sampled = ds(&schema, vec![]);
        assert_eq!(
            balance_negatives(&sampled, &full, &SamplerConfig::default()).unwrap(),
            sampled
        );
    }

    #[test]
    fn balance_insufficient_negatives() {
        let (schema, full) = pos_neg(7, 5);
        let sampled = ds(&schema, full.sentences[..7].to_vec());
        assert!(matches!(
            balance_negatives(&sampled, &full, &SamplerConfig::default()),
            Err(CorpusError::InsufficientNegatives { needed: 7, available: 5 })
        ));
    }

    #[test]
    fn split_sizes() {
        let cfg = SamplerConfig::default();
        for (n, valid) in [(400, 40), (200, 0), (301, 30), (300, 0)] {
            let (_, d) = pos_neg(n, 0);
            let (tr, va) = split_train_valid(&d, &cfg);
            assert_eq!((tr.len(), va.len()), (n - valid, valid), "n={n}");
            assert_eq!(tr.split_tag, SplitTag::Train);
            assert_eq!(va.split_tag, SplitTag::Valid);
        }
    }

    #[test]
    fn downsample_identity_and_pigeonhole() {
        let schema = ner_schema(&["A", "B", "C", "D", "E"]);
        let sents: Vec<_> = ["A", "B", "C", "D", "E"]
            .iter()
            .map(|l| sent(&format!("s{l}"), 1, vec![ent(0, 1, l)]))
            .collect();
        let d = ds(&schema, sents);
        assert_eq!(downsample_test(&d, 5, 9).unwrap().sentences, d.sentences);
        assert!(matches!(
            downsample_test(&d, 3, 9),
            Err(CorpusError::TargetTooSmall { target: 3, required: 5 })
        ));
        assert!(matches!(
            downsample_test(&d, 6, 9),
            Err(CorpusError::TargetTooLarge { .. })
        ));
    }

    #[test]
    fn ratio_parse() {
        assert_eq!("1:1".parse::<Ratio>().unwrap(), Ratio::new(1, 1));
        assert_eq!("1/10".parse::<Ratio>().unwrap().floor_mul(301), 30);
        assert!("1:0".parse::<Ratio>().is_err());
    }
}
