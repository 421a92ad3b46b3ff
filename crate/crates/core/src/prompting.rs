//! Prompt compilation and answer parsing.
//!
//! Two prompt families are supported:
//!
//! - **Multiple choice** (reranking): one unit per question, each candidate
//!   label verbalized by a per-label template, target span(s) quoted by
//!   `<t>` markers, answers of the form `Answer: (b)`.
//! - **Plain in-context** (baseline): `Sentence: ...` followed by a
//!   task-specific answer line such as `Entities: (PER, Bob), (ORG, Acme)`.
//!
//! Template files are TOML:
//!
//! ```toml
//! task = "NER"
//! none = "{ent} do/does not belong to any known entities."
//! mcq_instruct = "Read following sentence and identify what is the entity type of {ent} quoted by <t>."
//!
//! [[label]]
//! name = "person-artist/author"
//! template = "{ent} is an artist or author."
//! ```
//!
//! Placeholders: `{ent}` (NER), `{evt}` (ED), `{subj}` and `{obj}` (RE).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Annotation, LabelSchema, SentenceRecord, Span, Task, Unit, NONE_LABEL};
use crate::rng;

/// Target marker wrapped around the unit being asked about.
pub const MARKER: &str = "<t>";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template file: {0}")]
    Format(String),
    #[error("template set is for {found}, schema is {expected}")]
    TaskMismatch { expected: Task, found: Task },
    #[error("no choice template for label {0:?}")]
    MissingTemplate(String),
    #[error("template for {label:?} uses placeholder {placeholder} not valid for the task")]
    BadPlaceholder { label: String, placeholder: String },
    #[error("sentence {0:?} already contains the {MARKER} marker")]
    MarkerCollision(String),
    #[error("unknown instruction variant {0:?} (expected I0..I5)")]
    BadVariant(String),
    #[error("malformed demo at line {line}: {reason}")]
    MalformedDemo { line: usize, reason: String },
    #[error("unit does not fit sentence {0:?}")]
    UnitMismatch(String),
    #[error("multiple-choice prompts are not defined for {0}")]
    UnsupportedTask(Task),
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

fn placeholders(task: Task) -> &'static [&'static str] {
    match task {
        Task::Ner => &["ent"],
        Task::Ed => &["evt"],
        Task::Re => &["subj", "obj"],
        Task::Eae => &[],
    }
}

fn default_mcq_instruct(task: Task) -> &'static str {
    match task {
        Task::Ner => "Read following sentence and identify what is the entity type of {ent} quoted by <t>.",
        Task::Re => "Read the sentence and determine the relation between {subj} and {obj} quoted by <t>.",
        Task::Ed => "Read following sentence and identify what event is triggered by the word {evt} quoted by <t>.",
        Task::Eae => "",
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    task: Task,
    none: String,
    #[serde(default)]
    none_name: Option<String>,
    #[serde(default)]
    mcq_instruct: Option<String>,
    #[serde(default)]
    label: Vec<LabelEntry>,
    #[serde(default)]
    instructions: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelEntry {
    name: String,
    template: String,
    #[serde(default)]
    definition: Option<String>,
}

/// Label verbalizers and instruction texts for one label schema.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub schema: LabelSchema,
    templates: BTreeMap<String, String>,
    definitions: BTreeMap<String, String>,
    none_template: String,
    mcq_instruct: String,
    instructions: BTreeMap<InstructionVariant, String>,
}

impl TemplateSet {
    pub fn load(path: &Path, schema: &LabelSchema) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, Some(schema))
    }

    /// Parses a template file. Without a schema, the file's own label list
    /// (in file order) becomes the schema.
    pub fn parse(text: &str, schema: Option<&LabelSchema>) -> Result<Self> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| PromptError::Format(e.to_string()))?;
        let schema = match schema {
            Some(s) => {
                if s.task() != file.task {
                    return Err(PromptError::TaskMismatch {
                        expected: s.task(),
                        found: file.task,
                    });
                }
                s.clone()
            }
            None => LabelSchema::new(file.task, file.label.iter().map(|l| l.name.clone()))
                .map_err(|e| PromptError::Format(e.to_string()))?,
        };
        let allowed = placeholders(file.task);
        let check = |label: &str, t: &str| -> Result<()> {
            for cap in placeholder_re().captures_iter(t) {
                if !allowed.contains(&&cap[1]) {
                    return Err(PromptError::BadPlaceholder {
                        label: label.to_string(),
                        placeholder: cap[0].to_string(),
                    });
                }
            }
            Ok(())
        };
        check(NONE_LABEL, &file.none)?;
        let mut templates = BTreeMap::new();
        let mut definitions = BTreeMap::new();
        for entry in file.label {
            if templates.contains_key(&entry.name) {
                return Err(PromptError::Format(format!(
                    "duplicate template for {:?}",
                    entry.name
                )));
            }
            if !schema.contains(&entry.name) {
                continue;
            }
            check(&entry.name, &entry.template)?;
            if let Some(d) = entry.definition {
                definitions.insert(entry.name.clone(), d);
            }
            templates.insert(entry.name, entry.template);
        }
        for l in schema.labels() {
            if !templates.contains_key(l) {
                return Err(PromptError::MissingTemplate(l.clone()));
            }
        }
        let mut instructions = BTreeMap::new();
        for (k, v) in file.instructions {
            instructions.insert(k.parse()?, v);
        }
        let _ = file.none_name;
        Ok(Self {
            mcq_instruct: file
                .mcq_instruct
                .unwrap_or_else(|| default_mcq_instruct(schema.task()).to_string()),
            schema,
            templates,
            definitions,
            none_template: file.none,
            instructions,
        })
    }

    /// Template-free set for plain in-context prompts (any task, EAE included).
    pub fn bare(schema: &LabelSchema) -> Self {
        Self {
            schema: schema.clone(),
            templates: BTreeMap::new(),
            definitions: BTreeMap::new(),
            none_template: String::new(),
            mcq_instruct: default_mcq_instruct(schema.task()).to_string(),
            instructions: BTreeMap::new(),
        }
    }

    pub fn task(&self) -> Task {
        self.schema.task()
    }

    pub fn template(&self, label: &str) -> Option<&str> {
        if label == NONE_LABEL {
            (!self.none_template.is_empty()).then_some(self.none_template.as_str())
        } else {
            self.templates.get(label).map(String::as_str)
        }
    }

    /// Short definition used by the definition-listing instruction variants:
    /// the explicit `definition`, else the template with placeholders removed.
    pub fn definition(&self, label: &str) -> String {
        if let Some(d) = self.definitions.get(label) {
            return d.clone();
        }
        match self.templates.get(label) {
            Some(t) => placeholder_re()
                .replace_all(t, "")
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" "),
            None => label.to_string(),
        }
    }

    /// Renders the choice text for `label` about `target`.
    pub fn verbalize(&self, label: &str, target: &Target) -> Result<String> {
        let t = self
            .template(label)
            .ok_or_else(|| PromptError::MissingTemplate(label.to_string()))?;
        Ok(target.fill(t))
    }

    pub fn mcq_instruct(&self, target: &Target) -> String {
        target.fill(&self.mcq_instruct)
    }

    pub fn instruction(&self, variant: InstructionVariant) -> String {
        if let Some(text) = self.instructions.get(&variant) {
            return text
                .replace("{types}", &self.schema.labels().join(", "))
                .replace("{definitions}", &self.definition_list());
        }
        default_instruction(self, variant)
    }

    fn definition_list(&self) -> String {
        self.schema
            .labels()
            .iter()
            .map(|l| format!("- {l}: {}", self.definition(l)))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z]+)\}").unwrap())
}

/// Surface forms and the marked-up sentence for one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    /// `(placeholder, surface)` pairs.
    pub fills: Vec<(&'static str, String)>,
    pub marked_sentence: String,
}

impl Target {
    pub fn new(sentence: &SentenceRecord, unit: &Unit) -> Result<Self> {
        if sentence.tokens.iter().any(|t| t.contains(MARKER)) {
            return Err(PromptError::MarkerCollision(sentence.sentence_id.clone()));
        }
        let len = sentence.tokens.len();
        let spans = unit.spans();
        if spans.iter().any(|s| s.start >= s.end || s.end > len) {
            return Err(PromptError::UnitMismatch(sentence.sentence_id.clone()));
        }
        let fills = match unit {
            Unit::Entity { span } => vec![("ent", sentence.surface(*span))],
            Unit::Trigger { span } => vec![("evt", sentence.surface(*span))],
            Unit::Relation { subj, obj } => vec![
                ("subj", sentence.surface(*subj)),
                ("obj", sentence.surface(*obj)),
            ],
            Unit::Argument { .. } => return Err(PromptError::UnsupportedTask(Task::Eae)),
        };
        Ok(Self {
            fills,
            marked_sentence: mark(&sentence.tokens, &spans),
        })
    }

    pub fn fill(&self, template: &str) -> String {
        let mut out = template.to_string();
        for (name, surface) in &self.fills {
            out = out.replace(&format!("{{{name}}}"), surface);
        }
        out
    }
}

/// Joins tokens with spaces, wrapping each span in `<t> ... <t>`.
fn mark(tokens: &[String], spans: &[Span]) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(tokens.len() + 2 * spans.len());
    for (i, tok) in tokens.iter().enumerate() {
        for s in spans {
            if s.start == i {
                parts.push(MARKER);
            }
        }
        parts.push(tok);
        for s in spans {
            if s.end == i + 1 {
                parts.push(MARKER);
            }
        }
    }
    parts.join(" ")
}

/// One worked multiple-choice example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDemo", into = "RawDemo")]
pub struct DemoExample {
    pub demo_id: String,
    pub instruct: String,
    /// Sentence with the target quoted by `<t>` markers.
    pub sentence: String,
    pub choices: Vec<String>,
    pub analysis: Option<String>,
    pub answer_index: usize,
}

#[derive(Serialize, Deserialize)]
struct RawDemo {
    demo_id: String,
    instruct: String,
    sentence: String,
    choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    analysis: Option<String>,
    answer: String,
}

impl TryFrom<RawDemo> for DemoExample {
    type Error = String;

    fn try_from(r: RawDemo) -> std::result::Result<Self, String> {
        let answer_index = letter_index(r.answer.trim_matches(|c| c == '(' || c == ')'))
            .ok_or_else(|| format!("bad answer letter {:?}", r.answer))?;
        if answer_index >= r.choices.len() {
            return Err(format!(
                "answer {:?} outside {} choices",
                r.answer,
                r.choices.len()
            ));
        }
        Ok(Self {
            demo_id: r.demo_id,
            instruct: r.instruct,
            sentence: r.sentence,
            choices: r.choices,
            analysis: r.analysis,
            answer_index,
        })
    }
}

impl From<DemoExample> for RawDemo {
    fn from(d: DemoExample) -> Self {
        RawDemo {
            demo_id: d.demo_id,
            instruct: d.instruct,
            sentence: d.sentence,
            choices: d.choices,
            analysis: d.analysis,
            answer: letter(d.answer_index),
        }
    }
}

impl DemoExample {
    /// Builds an analysis-free demo from a gold-annotated unit. The gold label
    /// is appended to `candidates` when missing.
    pub fn from_gold(
        demo_id: impl Into<String>,
        sentence: &SentenceRecord,
        unit: &Unit,
        candidates: &[String],
        tset: &TemplateSet,
    ) -> Result<Self> {
        let target = Target::new(sentence, unit)?;
        let gold = sentence.gold_label(unit);
        let mut labels: Vec<&str> = candidates.iter().map(String::as_str).collect();
        if !labels.contains(&gold) {
            labels.push(gold);
        }
        let choices = labels
            .iter()
            .map(|l| tset.verbalize(l, &target))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            demo_id: demo_id.into(),
            instruct: tset.mcq_instruct(&target),
            sentence: target.marked_sentence,
            answer_index: labels.iter().position(|l| *l == gold).unwrap(),
            choices,
            analysis: None,
        })
    }

    /// Demo block text. The analysis line appears only with `cot`.
    pub fn render(&self, cot: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Instruct: {}", self.instruct);
        let _ = writeln!(out, "Sentence: {}", self.sentence);
        for (i, c) in self.choices.iter().enumerate() {
            let _ = writeln!(out, "({}) {}", letter(i), c);
        }
        if cot {
            if let Some(a) = &self.analysis {
                let _ = writeln!(out, "Analysis: {a}");
            }
        }
        let _ = write!(out, "Answer: ({})", letter(self.answer_index));
        out
    }
}

/// Reads a demo file (one JSON object per line).
pub fn load_demos(path: &Path) -> Result<Vec<DemoExample>> {
    let file = File::open(path).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| PromptError::MalformedDemo {
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Choice letters: `a`..`z`, then `aa`, `ab`, ... for long label lists.
pub fn letter(i: usize) -> String {
    if i < 26 {
        ((b'a' + i as u8) as char).to_string()
    } else {
        let j = i - 26;
        format!(
            "{}{}",
            (b'a' + (j / 26) as u8 % 26) as char,
            (b'a' + (j % 26) as u8) as char
        )
    }
}

fn letter_index(s: &str) -> Option<usize> {
    let b = s.as_bytes();
    match b {
        [c] if c.is_ascii_lowercase() => Some((c - b'a') as usize),
        [c1, c2] if c1.is_ascii_lowercase() && c2.is_ascii_lowercase() => {
            Some(26 + (c1 - b'a') as usize * 26 + (c2 - b'a') as usize)
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub sample_id: String,
    pub token_estimate: usize,
}

/// A compiled prompt: instruction, demos and question, plus the mapping
/// needed to read the answer back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub demo_block: Vec<String>,
    pub question: String,
    /// `(letter, label)` in choice order. Empty for plain in-context prompts.
    pub choice_map: Vec<(String, String)>,
    /// Rendered choice texts, parallel to `choice_map`.
    pub choice_texts: Vec<String>,
    /// Label kept when the answer cannot be parsed (the filter's top choice).
    pub fallback_label: String,
    pub meta: PromptMeta,
}

impl PromptBundle {
    fn assemble(
        instruction: String,
        demo_block: Vec<String>,
        question: String,
        choice_map: Vec<(String, String)>,
        choice_texts: Vec<String>,
        fallback_label: String,
        sample_id: String,
    ) -> Self {
        let mut b = Self {
            instruction,
            demo_block,
            question,
            choice_map,
            choice_texts,
            fallback_label,
            meta: PromptMeta {
                sample_id,
                token_estimate: 0,
            },
        };
        b.meta.token_estimate = estimate_tokens(&b.text());
        b
    }

    /// Full prompt: non-empty parts separated by blank lines.
    pub fn text(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if !self.instruction.is_empty() {
            parts.push(&self.instruction);
        }
        parts.extend(self.demo_block.iter().map(String::as_str));
        parts.push(&self.question);
        parts.join("\n\n")
    }

    pub fn label_for(&self, letter: &str) -> Option<&str> {
        self.choice_map
            .iter()
            .find(|(l, _)| l == letter)
            .map(|(_, label)| label.as_str())
    }
}

/// `ceil(bytes / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Choice ordering policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceOrder {
    /// Candidate-set order (probability descending, `None` last).
    #[default]
    AsGiven,
    /// Seeded shuffle per sample, for order-sensitivity experiments.
    Shuffled { seed: u64 },
}

/// Compiles a multiple-choice rerank prompt for one sample.
pub fn render_mcq(
    sentence: &SentenceRecord,
    unit: &Unit,
    cands: &crate::filtering::CandidateSet,
    demos: &[DemoExample],
    tset: &TemplateSet,
    cot: bool,
    order: ChoiceOrder,
) -> Result<PromptBundle> {
    if tset.task() == Task::Eae {
        return Err(PromptError::UnsupportedTask(Task::Eae));
    }
    let target = Target::new(sentence, unit)?;
    let mut labels: Vec<&str> = cands.candidates.iter().map(String::as_str).collect();
    if let ChoiceOrder::Shuffled { seed } = order {
        labels.shuffle(&mut rng::seeded(seed, &cands.sample_id));
    }
    let choice_texts = labels
        .iter()
        .map(|l| tset.verbalize(l, &target))
        .collect::<Result<Vec<_>>>()?;
    let choice_map: Vec<(String, String)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (letter(i), l.to_string()))
        .collect();

    let mut question = String::new();
    let _ = writeln!(question, "Instruct: {}", tset.mcq_instruct(&target));
    let _ = write!(question, "Sentence: {}", target.marked_sentence);
    for ((l, _), text) in choice_map.iter().zip(&choice_texts) {
        let _ = write!(question, "\n({l}) {text}");
    }

    Ok(PromptBundle::assemble(
        String::new(),
        demos.iter().map(|d| d.render(cot)).collect(),
        question,
        choice_map,
        choice_texts,
        cands.candidates.first().cloned().unwrap_or_else(|| NONE_LABEL.to_string()),
        cands.sample_id.clone(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    ParsedFallback,
    Failed,
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s*:\s*\(\s*([a-z]{1,2})\s*\)").unwrap())
}

fn paren_letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(\s*([a-zA-Z]{1,2})\s*\)").unwrap())
}

/// Maps an LLM reply back to a label. Never fails: unparseable replies keep
/// the bundle's fallback label with [`ParseStatus::Failed`].
///
/// Order of attempts: the last `Answer: (x)` naming a valid letter; a single
/// parenthesized letter on the final non-empty line; a reply containing the
/// text of exactly one choice (case-insensitive).
pub fn parse_mcq_answer(text: &str, bundle: &PromptBundle) -> (String, ParseStatus) {
    let valid = |m: &str| bundle.label_for(&m.to_ascii_lowercase()).map(str::to_string);

    if let Some(label) = answer_re()
        .captures_iter(text)
        .filter_map(|c| valid(&c[1]))
        .last()
    {
        return (label, ParseStatus::Parsed);
    }

    if let Some(last) = text.lines().rev().find(|l| !l.trim().is_empty()) {
        let letters: Vec<_> = paren_letter_re().captures_iter(last).collect();
        if letters.len() == 1 {
            if let Some(label) = valid(&letters[0][1]) {
                return (label, ParseStatus::ParsedFallback);
            }
        }
    }

    let lower = text.to_lowercase();
    let hits: Vec<usize> = bundle
        .choice_texts
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let needle = c.trim().trim_end_matches('.').to_lowercase();
            !needle.is_empty() && lower.contains(&needle)
        })
        .map(|(i, _)| i)
        .collect();
    if hits.len() == 1 {
        return (bundle.choice_map[hits[0]].1.clone(), ParseStatus::ParsedFallback);
    }

    (bundle.fallback_label.clone(), ParseStatus::Failed)
}

/// Byte-level entry point; invalid UTF-8 is replaced before parsing.
pub fn parse_mcq_bytes(bytes: &[u8], bundle: &PromptBundle) -> (String, ParseStatus) {
    parse_mcq_answer(&String::from_utf8_lossy(bytes), bundle)
}

// ---------------------------------------------------------------------------
// Plain in-context prompts
// ---------------------------------------------------------------------------

/// Instruction variants, from empty (`I0`) to long annotator instructions with
/// per-label definitions (`I5`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InstructionVariant(u8);

impl InstructionVariant {
    pub const I0: Self = Self(0);
    pub const I1: Self = Self(1);

    pub fn new(n: u8) -> Result<Self> {
        if n <= 5 {
            Ok(Self(n))
        } else {
            Err(PromptError::BadVariant(format!("I{n}")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }
}

impl FromStr for InstructionVariant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self> {
        let n = s
            .strip_prefix(['I', 'i'])
            .and_then(|d| d.parse::<u8>().ok())
            .ok_or_else(|| PromptError::BadVariant(s.to_string()))?;
        Self::new(n).map_err(|_| PromptError::BadVariant(s.to_string()))
    }
}

impl TryFrom<String> for InstructionVariant {
    type Error = PromptError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InstructionVariant> for String {
    fn from(v: InstructionVariant) -> String {
        format!("I{}", v.0)
    }
}

struct TaskWords {
    /// "entities"
    plural: &'static str,
    /// "entity"
    singular: &'static str,
    /// "entity types"
    types: &'static str,
    annotator: &'static str,
    task_name: &'static str,
    item: &'static str,
    answer_key: &'static str,
    sentinel: &'static str,
}

fn words(task: Task) -> TaskWords {
    match task {
        Task::Ner => TaskWords {
            plural: "entities",
            singular: "entity",
            types: "entity types",
            annotator: "entity-instance",
            task_name: "Named Entity Recognition",
            item: "identified_entity",
            answer_key: "Entities",
            sentinel: "No entities found.",
        },
        Task::Ed => TaskWords {
            plural: "event triggers",
            singular: "event trigger",
            types: "event types",
            annotator: "event-trigger",
            task_name: "Event Detection",
            item: "identified_trigger",
            answer_key: "Event triggers",
            sentinel: "No events found.",
        },
        Task::Eae => TaskWords {
            plural: "event arguments",
            singular: "argument",
            types: "argument roles",
            annotator: "event-argument",
            task_name: "Event Argument Extraction",
            item: "identified_argument",
            answer_key: "Arguments",
            sentinel: "No arguments found.",
        },
        Task::Re => TaskWords {
            plural: "relations",
            singular: "relation",
            types: "relation types",
            annotator: "relation-instance",
            task_name: "Relation Extraction",
            item: "relation",
            answer_key: "Relation",
            sentinel: "None",
        },
    }
}

fn default_instruction(tset: &TemplateSet, v: InstructionVariant) -> String {
    let w = words(tset.task());
    let types = tset.schema.labels().join(", ");
    let defs = tset.definition_list();
    let (locate, classify, format_note, none_note) = if tset.task() == Task::Re {
        (
            "Identify the relation between the subject and the object in each sentence.".to_string(),
            "(1) read the subject and the object in the sentence, and (2) classify the relation between them".to_string(),
            "Please note that your annotation results must follow such format: 'Relation: [Type]'.".to_string(),
            "If the subject and the object have no relation of these types, just output 'Relation: None'.".to_string(),
        )
    } else {
        (
            format!(
                "Identify the {p} expressed by each sentence, and locate each {s} to words in the sentence.",
                p = w.plural,
                s = w.singular
            ),
            format!(
                "(1) identify the word or phrase about the {s} in the sentence, and (2) classify its {s} type",
                s = w.singular
            ),
            format!(
                "Please note that your annotation results must follow such format: 'Answer: ([Type_1] <SEP> {i}:[{k}_1]), ([Type_2] <SEP> {i}:[{k}_2]), ......'.",
                i = w.item,
                k = capitalize(w.singular).replace(' ', "_")
            ),
            format!(
                "If you do not find any {s} in this sentence, just output 'Answer: {n}'",
                s = w.singular,
                n = w.sentinel
            ),
        )
    };
    let annotator = format!("Assume you are an {} annotator.", w.annotator);
    match v.0 {
        0 => String::new(),
        1 => format!("{locate} The possible {t} are: {types}. {none_note}", t = w.types),
        2 => format!("{locate} The possible {t} are:\n{defs}\n{none_note}", t = w.types),
        3 => format!(
            "{annotator} Given a sentence, you need to {classify}. The possible {t} are listed as below:\n{types}.\n{format_note}\n{none_note}",
            t = w.types
        ),
        4 => format!(
            "{annotator} Your objective is to perform a series of intricate steps for {task}. Firstly, you have to identify a particular word or phrase in the sentence that corresponds to an {s}. Following this, classify the {s} into one of the potential {t}. The potential {t} are provided as below:\n{types}.\n{format_note} {none_note}",
            task = w.task_name,
            s = w.singular,
            t = w.types
        ),
        _ => format!(
            "{annotator} Given a sentence, you need to {classify}. The possible {t} are listed as below:\n{defs}\n{format_note} {none_note}",
            t = w.types
        ),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// What a plain in-context question asks about.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IclQuery {
    /// All entities or triggers of the sentence (NER, ED).
    Sentence,
    /// The relation of one entity pair (RE).
    Pair { subj: Span, obj: Span },
    /// The arguments of one event mention (EAE).
    Event { trigger: Span, event: String },
}

impl IclQuery {
    /// Queries posed for a gold sentence: one per sentence for NER/ED, one
    /// per distinct annotated pair or event mention otherwise.
    pub fn from_gold(task: Task, sentence: &SentenceRecord) -> Vec<IclQuery> {
        match task {
            Task::Ner | Task::Ed => vec![IclQuery::Sentence],
            Task::Re | Task::Eae => {
                let mut out: Vec<IclQuery> = Vec::new();
                for a in &sentence.annotations {
                    let q = match &a.unit {
                        Unit::Relation { subj, obj } => IclQuery::Pair {
                            subj: *subj,
                            obj: *obj,
                        },
                        Unit::Argument { trigger, event, .. } => IclQuery::Event {
                            trigger: *trigger,
                            event: event.clone(),
                        },
                        _ => continue,
                    };
                    if !out.contains(&q) {
                        out.push(q);
                    }
                }
                out
            }
        }
    }

    /// Gold annotations of `sentence` that answer this query.
    pub fn answers<'a>(&self, sentence: &'a SentenceRecord) -> Vec<&'a Annotation> {
        sentence
            .annotations
            .iter()
            .filter(|a| match (self, &a.unit) {
                (IclQuery::Sentence, _) => true,
                (IclQuery::Pair { subj, obj }, Unit::Relation { subj: s, obj: o }) => {
                    s == subj && o == obj
                }
                (IclQuery::Event { trigger, event }, Unit::Argument { trigger: t, event: e, .. }) => {
                    t == trigger && e == event
                }
                _ => false,
            })
            .collect()
    }
}

/// A demonstration for plain prompts: a gold sentence and the query it answers.
#[derive(Debug, Clone, Copy)]
pub struct IclDemo<'a> {
    pub sentence: &'a SentenceRecord,
    pub query: &'a IclQuery,
}

fn icl_header(task: Task, sentence: &SentenceRecord, query: &IclQuery) -> String {
    let mut out = format!("Sentence: {}", sentence.text());
    match query {
        IclQuery::Pair { subj, obj } => {
            let _ = write!(
                out,
                "\nSubject: {}\nObject: {}",
                sentence.surface(*subj),
                sentence.surface(*obj)
            );
        }
        IclQuery::Event { trigger, event } => {
            let _ = write!(out, "\nTrigger: {} ({event})", sentence.surface(*trigger));
        }
        IclQuery::Sentence => {}
    }
    let _ = write!(out, "\n{}:", words(task).answer_key);
    out
}

/// Gold answer text in the same format the model is asked to produce.
pub fn serialize_icl_answer(task: Task, sentence: &SentenceRecord, query: &IclQuery) -> String {
    let answers = query.answers(sentence);
    let w = words(task);
    if task == Task::Re {
        return answers
            .first()
            .map(|a| a.label.clone())
            .unwrap_or_else(|| NONE_LABEL.to_string());
    }
    if answers.is_empty() {
        return w.sentinel.to_string();
    }
    answers
        .iter()
        .map(|a| {
            let span = match &a.unit {
                Unit::Entity { span } | Unit::Trigger { span } | Unit::Argument { span, .. } => *span,
                Unit::Relation { subj, .. } => *subj,
            };
            format!("({}, {})", a.label, sentence.surface(span))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Compiles a plain in-context prompt: instruction, serialized demos, and the
/// test question with an empty answer slot.
pub fn render_icl(
    sentence: &SentenceRecord,
    query: &IclQuery,
    demos: &[IclDemo<'_>],
    tset: &TemplateSet,
    variant: InstructionVariant,
) -> PromptBundle {
    let task = tset.task();
    let demo_block = demos
        .iter()
        .map(|d| {
            format!(
                "{} {}",
                icl_header(task, d.sentence, d.query),
                serialize_icl_answer(task, d.sentence, d.query)
            )
        })
        .collect();
    PromptBundle::assemble(
        tset.instruction(variant),
        demo_block,
        icl_header(task, sentence, query),
        Vec::new(),
        Vec::new(),
        NONE_LABEL.to_string(),
        sentence.sentence_id.clone(),
    )
}

/// Parsed `(surface, label)` items of a plain in-context reply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IclParse {
    pub items: Vec<(String, String)>,
    /// Items dropped because their label is not in the schema.
    pub unknown_labels: usize,
    pub sentinel: bool,
}

fn sep_tuple_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\(\s*\[?([^()<\[\]]+?)\]?\s*<SEP>\s*identified_\w+\s*:\s*\[?([^()\[\]]+?)\]?\s*\)").unwrap()
    })
}

fn plain_tuple_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(\s*([^,()]+?)\s*,\s*([^()]+?)\s*\)").unwrap())
}

fn sentinel_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)no\s+[a-z ]*\s*found").unwrap())
}

/// Lenient parser for plain in-context replies. Text after a hallucinated
/// follow-up `Sentence:` block is ignored.
pub fn parse_icl_answer(text: &str, task: Task, schema: &LabelSchema) -> IclParse {
    let body = match text.find("Sentence:") {
        Some(0) => text,
        Some(i) => &text[..i],
        None => text,
    };
    let mut out = IclParse::default();
    if task == Task::Re {
        let line = body
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or("");
        let label = line
            .trim_start_matches("Answer:")
            .trim()
            .trim_start_matches("Relation:")
            .trim()
            .trim_end_matches('.')
            .trim();
        let is_none = label.is_empty()
            || ["none", "no_relation", "no relation", "na"].contains(&label.to_lowercase().as_str());
        if is_none {
            out.sentinel = true;
        } else if schema.contains(label) {
            out.items.push((String::new(), label.to_string()));
        } else {
            out.unknown_labels += 1;
        }
        return out;
    }

    let mut tuples: Vec<(String, String)> = sep_tuple_re()
        .captures_iter(body)
        .map(|c| (c[1].trim().to_string(), c[2].trim().to_string()))
        .collect();
    if tuples.is_empty() {
        tuples = plain_tuple_re()
            .captures_iter(body)
            .map(|c| (c[1].trim().to_string(), c[2].trim().to_string()))
            .collect();
    }
    for (label, surface) in tuples {
        if label == NONE_LABEL {
            continue;
        }
        if schema.contains(&label) {
            out.items.push((surface, label));
        } else {
            out.unknown_labels += 1;
        }
    }
    if out.items.is_empty() && out.unknown_labels == 0 && sentinel_re().is_match(body) {
        out.sentinel = true;
    }
    out
}

/// Result of locating a surface string in a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub span: Option<Span>,
    /// More than one exact match existed; the leftmost was taken.
    pub ambiguous: bool,
}

/// Leftmost exact token-sequence match of `surface` in `tokens`.
pub fn align_surface(tokens: &[String], surface: &str) -> Alignment {
    let needle: Vec<&str> = surface.split_whitespace().collect();
    if needle.is_empty() || needle.len() > tokens.len() {
        return Alignment {
            span: None,
            ambiguous: false,
        };
    }
    let mut hits = (0..=tokens.len() - needle.len())
        .filter(|&i| needle.iter().zip(&tokens[i..]).all(|(a, b)| *a == b.as_str()));
    let first = hits.next();
    Alignment {
        span: first.map(|i| Span::new(i, i + needle.len())),
        ambiguous: first.is_some() && hits.next().is_some(),
    }
}
