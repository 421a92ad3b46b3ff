//! End-to-end runs: filter-only, adaptive filter-then-rerank, the SLM
//! reranker baseline and the plain in-context baseline, plus threshold
//! tuning, ablations and report files.
//!
//! A run is configured by one TOML file. `${VAR}` is replaced by the
//! environment variable `VAR` before parsing; relative paths are resolved
//! against the config file's directory.
//!
//! ```toml
//! mode = "filter_then_rerank"   # filter_only | slm_rerank_baseline | icl_baseline
//! seed = 42
//! demo_count = 4
//! demo_strategy = "random"      # or "embedding"
//!
//! [router]
//! tau = 0.6
//! top_n = 3
//!
//! [ablations]
//! cot = true
//! demo = true
//! label_filter = true
//! adaptive = true
//!
//! [paths]
//! schema = "data/fewnerd.schema.json"
//! dataset = "data/test.jsonl"
//! scores = "data/scores.jsonl"
//! templates = "data/fewnerd.toml"
//! demos = "data/fewnerd.demos.jsonl"
//! output = "runs/fewnerd"
//! cache = "runs/llm-cache.jsonl"
//!
//! [llm]
//! backend = "http"              # or "mock"
//! model = "${LLM_MODEL}"
//! requests_per_minute = 20
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset, LabelSchema, SentenceRecord, Task, Unit, NONE_LABEL};
use crate::filtering::{
    self, all_candidates, classify_difficulty, filter_argmax, slm_rerank, top_candidates, CandidateSet,
    Difficulty, FilterError, RouterConfig, ScoreRecord, ScoreTable, SweepPoint,
};
use crate::llm_client::{
    CostLedger, GenRequest, HttpBackend, LlmClient, LlmError, MockHints, MockLlm, MockPolicy, ResponseCache,
    RetryPolicy,
};
use crate::metrics::{self, format_ratio, EvalReport, HeadRule, MetricsError, Prediction, RerankRow};
use crate::prompting::{
    self, align_surface, parse_icl_answer, parse_mcq_answer, render_icl, render_mcq, ChoiceOrder, DemoExample,
    IclDemo, IclQuery, InstructionVariant, ParseStatus, PromptError, TemplateSet,
};
use crate::retrieval::{self, EmbeddingTable, RetrievalError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 config, 3 data, 4 endpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Llm(LlmError::Config(_))
            | PipelineError::Corpus(CorpusError::InvalidConfig(_))
            | PipelineError::Filter(FilterError::InvalidConfig(_))
            | PipelineError::Prompt(PromptError::BadVariant(_)) => 2,
            PipelineError::Llm(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    IclBaseline,
    FilterOnly,
    #[default]
    FilterThenRerank,
    SlmRerankBaseline,
}

impl std::str::FromStr for Mode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| PipelineError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub cot: bool,
    pub demo: bool,
    pub label_filter: bool,
    pub adaptive: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            cot: true,
            demo: true,
            label_filter: true,
            adaptive: true,
        }
    }
}

impl Ablations {
    /// Demos off implies no analyses either.
    pub fn effective_cot(&self) -> bool {
        self.cot && self.demo
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoStrategy {
    #[default]
    Random,
    Embedding,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub schema: Option<PathBuf>,
    /// Gold test data.
    pub dataset: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    /// Further score files averaged with `scores`.
    pub ensemble_with: Vec<PathBuf>,
    /// Second filter used as reranker by the SLM baseline.
    pub slm_scores: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    /// Worked multiple-choice demos.
    pub demos: Option<PathBuf>,
    /// Labelled sentences used as plain in-context demos.
    pub demo_pool: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub valid_dataset: Option<PathBuf>,
    pub valid_scores: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.schema,
            &mut self.dataset,
            &mut self.scores,
            &mut self.slm_scores,
            &mut self.templates,
            &mut self.demos,
            &mut self.demo_pool,
            &mut self.embeddings,
            &mut self.valid_dataset,
            &mut self.valid_scores,
            &mut self.output,
            &mut self.cache,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.ensemble_with.iter_mut().for_each(fix);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    /// Gold answers; for plain prompts, the gold serialization.
    #[default]
    Oracle,
    FirstChoice,
    FixedText,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub policy: MockKind,
    pub text: String,
    pub p: f64,
    pub seed: u64,
    pub latency_ms: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            policy: MockKind::Oracle,
            text: String::new(),
            p: 1.0,
            seed: 0,
            latency_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: BackendKind,
    /// Endpoint base URL; `LLM_ENDPOINT` when empty.
    pub endpoint: Option<String>,
    /// Model id; `LLM_MODEL` when empty.
    pub model: Option<String>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub stop: Option<Vec<String>>,
    pub parallelism: usize,
    /// `0` disables rate limiting.
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub mock: MockConfig,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Http,
            endpoint: None,
            model: None,
            max_output_tokens: 256,
            temperature: 0.0,
            stop: None,
            parallelism: 4,
            requests_per_minute: 20,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            mock: MockConfig::default(),
        }
    }
}

impl LlmConfig {
    pub fn model_id(&self) -> String {
        self.model
            .clone()
            .filter(|m| !m.is_empty())
            .or_else(|| std::env::var("LLM_MODEL").ok().filter(|m| !m.is_empty()))
            .unwrap_or_else(|| match self.backend {
                BackendKind::Mock => "mock".to_string(),
                BackendKind::Http => String::new(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub router: RouterConfig,
    pub ablations: Ablations,
    pub demo_count: usize,
    pub demo_strategy: DemoStrategy,
    pub choice_order: ChoiceOrder,
    /// Instruction variant for plain in-context prompts.
    pub instruction: InstructionVariant,
    pub head_rule: HeadRule,
    /// Tune with a gold-answer reranker instead of the configured LLM.
    pub tune_oracle: bool,
    pub paths: Paths,
    pub llm: LlmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FilterThenRerank,
            seed: 0,
            router: RouterConfig::default(),
            ablations: Ablations::default(),
            demo_count: 4,
            demo_strategy: DemoStrategy::Random,
            choice_order: ChoiceOrder::AsGiven,
            instruction: InstructionVariant::I1,
            head_rule: HeadRule::LastToken,
            tune_oracle: false,
            paths: Paths::default(),
            llm: LlmConfig::default(),
        }
    }
}

fn var_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// Replaces `${VAR}` with the environment value; unset variables are errors.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut missing = Vec::new();
    let out = var_re().replace_all(text, |c: &regex::Captures| match lookup(&c[1]) {
        Some(v) => v,
        None => {
            missing.push(c[1].to_string());
            String::new()
        }
    });
    if !missing.is_empty() {
        return Err(PipelineError::Config(format!(
            "unset environment variable(s): {}",
            missing.join(", ")
        )));
    }
    Ok(out.into_owned())
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.paths.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.router.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let need = |p: &Option<PathBuf>, name: &str| {
            if p.is_none() {
                Err(PipelineError::Config(format!("mode {:?} needs paths.{name}", self.mode)))
            } else {
                Ok(())
            }
        };
        need(&self.paths.schema, "schema")?;
        need(&self.paths.dataset, "dataset")?;
        match self.mode {
            Mode::FilterOnly => need(&self.paths.scores, "scores")?,
            Mode::FilterThenRerank => {
                need(&self.paths.scores, "scores")?;
                need(&self.paths.templates, "templates")?;
                if self.ablations.demo && self.demo_count > 0 {
                    need(&self.paths.demos, "demos")?;
                }
            }
            Mode::SlmRerankBaseline => {
                need(&self.paths.scores, "scores")?;
                need(&self.paths.slm_scores, "slm_scores")?;
            }
            Mode::IclBaseline => {
                if self.ablations.demo && self.demo_count > 0 {
                    need(&self.paths.demo_pool, "demo_pool")?;
                }
            }
        }
        if self.demo_strategy == DemoStrategy::Embedding && self.ablations.demo && self.demo_count > 0 {
            need(&self.paths.embeddings, "embeddings")?;
        }
        if !(0.0..=1.0).contains(&self.llm.mock.p) {
            return Err(PipelineError::Config("llm.mock.p must lie in [0, 1]".into()));
        }
        if self.llm.temperature < 0.0 || self.llm.max_output_tokens == 0 {
            return Err(PipelineError::Config("llm.temperature >= 0 and llm.max_output_tokens >= 1 required".into()));
        }
        Ok(())
    }

    fn demos_enabled(&self) -> usize {
        if self.ablations.demo {
            self.demo_count
        } else {
            0
        }
    }
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Everything a run reads, loaded up front.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub gold: Dataset,
    pub scores: Option<ScoreTable>,
    pub slm_scores: Option<ScoreTable>,
    pub templates: Option<TemplateSet>,
    pub demos: Vec<DemoExample>,
    pub demo_pool: Option<Dataset>,
    pub embeddings: Option<EmbeddingTable>,
    pub valid_gold: Option<Dataset>,
    pub valid_scores: Option<ScoreTable>,
}

impl Inputs {
    pub fn new(gold: Dataset) -> Self {
        Self {
            gold,
            scores: None,
            slm_scores: None,
            templates: None,
            demos: Vec::new(),
            demo_pool: None,
            embeddings: None,
            valid_gold: None,
            valid_scores: None,
        }
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        let schema_path = p.schema.as_ref().ok_or_else(|| PipelineError::Config("paths.schema missing".into()))?;
        let schema = LabelSchema::load(schema_path)?;
        let dataset = p.dataset.as_ref().ok_or_else(|| PipelineError::Config("paths.dataset missing".into()))?;
        let mut inputs = Inputs::new(Dataset::load(dataset, &schema)?);
        if let Some(s) = &p.scores {
            let mut tables = vec![filtering::ingest_scores(s, &schema)?];
            for extra in &p.ensemble_with {
                tables.push(filtering::ingest_scores(extra, &schema)?);
            }
            inputs.scores = Some(if tables.len() == 1 {
                tables.pop().unwrap()
            } else {
                filtering::ensemble(&tables)?
            });
        }
        if let Some(s) = &p.slm_scores {
            inputs.slm_scores = Some(filtering::ingest_scores(s, &schema)?);
        }
        if let Some(t) = &p.templates {
            inputs.templates = Some(TemplateSet::load(t, &schema)?);
        }
        if let Some(d) = &p.demos {
            inputs.demos = prompting::load_demos(d)?;
        }
        if let Some(d) = &p.demo_pool {
            inputs.demo_pool = Some(Dataset::load(d, &schema)?);
        }
        if let Some(e) = &p.embeddings {
            inputs.embeddings = Some(EmbeddingTable::load(e)?);
        }
        if let Some(v) = &p.valid_dataset {
            inputs.valid_gold = Some(Dataset::load(v, &schema)?);
        }
        if let Some(v) = &p.valid_scores {
            inputs.valid_scores = Some(filtering::ingest_scores(v, &schema)?);
        }
        Ok(inputs)
    }

    fn scores(&self) -> Result<&ScoreTable> {
        let s = self
            .scores
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no filter scores loaded".into()))?;
        check_coverage(s, &self.gold)?;
        Ok(s)
    }

    fn templates(&self) -> Result<&TemplateSet> {
        self.templates
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no templates loaded".into()))
    }
}

fn check_coverage(scores: &ScoreTable, gold: &Dataset) -> Result<()> {
    if scores.schema != gold.schema {
        return Err(PipelineError::Data("score table and dataset use different schemas".into()));
    }
    let index = gold.index();
    for r in scores.records.values() {
        if !index.contains_key(r.sentence_id.as_str()) {
            return Err(PipelineError::Data(format!(
                "sample {} refers to unknown sentence {}",
                r.sample_id, r.sentence_id
            )));
        }
    }
    Ok(())
}

/// Gold label for every scored sample.
pub fn gold_labels(scores: &ScoreTable, gold: &Dataset) -> HashMap<String, String> {
    let index = gold.index();
    scores
        .records
        .values()
        .filter_map(|r| {
            index
                .get(r.sentence_id.as_str())
                .map(|s| (r.sample_id.clone(), s.gold_label(&r.unit).to_string()))
        })
        .collect()
}

/// Builds the LLM client described by `cfg.llm`. Mock backends derive their
/// answers from `inputs`.
pub fn build_client(cfg: &RunConfig, inputs: &Inputs) -> Result<LlmClient> {
    let l = &cfg.llm;
    let client = match l.backend {
        BackendKind::Http => {
            let timeout = Duration::from_secs(l.timeout_secs.max(1));
            let backend = match &l.endpoint {
                Some(e) if !e.is_empty() => {
                    HttpBackend::new(e, std::env::var("LLM_API_KEY").ok().filter(|k| !k.is_empty()), timeout)?
                }
                _ => HttpBackend::from_env(timeout)?,
            };
            if l.model_id().is_empty() {
                return Err(PipelineError::Config("no model id: set llm.model or LLM_MODEL".into()));
            }
            LlmClient::new(backend).with_rate_limit(l.requests_per_minute)
        }
        BackendKind::Mock => {
            let m = &l.mock;
            let gold = || -> HashMap<String, String> {
                let mut g = HashMap::new();
                if let Some(s) = &inputs.scores {
                    g.extend(gold_labels(s, &inputs.gold));
                }
                if let (Some(vs), Some(vg)) = (&inputs.valid_scores, &inputs.valid_gold) {
                    g.extend(gold_labels(vs, vg));
                }
                g
            };
            let policy = match (m.policy, cfg.mode) {
                (MockKind::Oracle, Mode::IclBaseline) => MockPolicy::Scripted(icl_gold_replies(inputs)),
                (MockKind::Oracle, _) => MockPolicy::Oracle { gold: gold() },
                (MockKind::FirstChoice, _) => MockPolicy::FirstChoice,
                (MockKind::FixedText, _) => MockPolicy::FixedText(m.text.clone()),
                (MockKind::Noisy, _) => MockPolicy::Noisy {
                    gold: gold(),
                    p: m.p,
                    seed: m.seed,
                },
            };
            LlmClient::new(MockLlm::new(policy)?.with_latency(m.latency_ms))
        }
    };
    let mut client = client.with_retry(l.retry).with_parallelism(l.parallelism);
    if let Some(c) = &cfg.paths.cache {
        client = client.with_cache(ResponseCache::open(c)?);
    }
    Ok(client)
}

// ---------------------------------------------------------------------------
// Decisions and reports
// ---------------------------------------------------------------------------

/// Routing outcome for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankDecision {
    pub sample_id: String,
    pub sentence_id: String,
    pub unit: Unit,
    pub routed: Difficulty,
    pub before_label: String,
    pub after_label: String,
    /// Absent unless an LLM answer was parsed.
    pub parse_status: Option<ParseStatus>,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_error: Option<String>,
}

impl RerankDecision {
    fn easy(rec: &ScoreRecord, label: &str, conf: f64) -> Self {
        Self {
            sample_id: rec.sample_id.clone(),
            sentence_id: rec.sentence_id.clone(),
            unit: rec.unit.clone(),
            routed: Difficulty::Easy,
            before_label: label.to_string(),
            after_label: label.to_string(),
            parse_status: None,
            confidence: conf,
            llm_latency_ms: None,
            llm_tokens: None,
            llm_error: None,
        }
    }

    fn prediction(&self, label: &str) -> Prediction {
        Prediction {
            sample_id: self.sample_id.clone(),
            sentence_id: self.sentence_id.clone(),
            unit: self.unit.clone(),
            label: label.to_string(),
            confidence: self.confidence,
        }
    }

    pub fn before(&self) -> Prediction {
        self.prediction(&self.before_label)
    }

    pub fn after(&self) -> Prediction {
        self.prediction(&self.after_label)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseCounts {
    pub parsed: usize,
    pub parsed_fallback: usize,
    pub failed: usize,
    /// Samples whose LLM call failed after retries (filter label kept).
    pub llm_errors: usize,
}

impl ParseCounts {
    pub fn from_decisions(d: &[RerankDecision]) -> Self {
        let mut c = Self::default();
        for x in d {
            match x.parse_status {
                Some(ParseStatus::Parsed) => c.parsed += 1,
                Some(ParseStatus::ParsedFallback) => c.parsed_fallback += 1,
                Some(ParseStatus::Failed) => c.failed += 1,
                None => {}
            }
            if x.llm_error.is_some() {
                c.llm_errors += 1;
            }
        }
        c
    }
}

/// Counters from plain in-context runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclDiagnostics {
    pub queries: usize,
    pub unknown_labels: usize,
    pub unmatched_surfaces: usize,
    pub ambiguous_surfaces: usize,
    pub sentinel_replies: usize,
    pub llm_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub mode: Mode,
    /// Sorted by sample id. Empty for plain in-context runs.
    pub decisions: Vec<RerankDecision>,
    /// Final predictions, in sample-id order.
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
    pub ledger: CostLedger,
    pub parse: ParseCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icl: Option<IclDiagnostics>,
}

fn score(preds: &[Prediction], gold: &Dataset, rule: HeadRule) -> Result<EvalReport> {
    Ok(if gold.schema.task() == Task::Eae {
        metrics::head_f1(preds, gold, rule)?
    } else {
        metrics::micro_f1(preds, gold)?
    })
}

/// Overall, bucketed and reranked-subset scores for a set of decisions.
pub fn evaluate_decisions(decisions: &[RerankDecision], gold: &Dataset, rule: HeadRule) -> Result<EvalReport> {
    let before: Vec<Prediction> = decisions.iter().map(RerankDecision::before).collect();
    let after: Vec<Prediction> = decisions.iter().map(RerankDecision::after).collect();
    let mut report = score(&after, gold, rule)?;
    report.bucket_rows = metrics::confidence_buckets(&before, &after, gold, &metrics::DEFAULT_EDGES)?;
    let index = gold.index();
    let hard: Vec<&RerankDecision> = decisions.iter().filter(|d| d.routed == Difficulty::Hard).collect();
    let gold_of = |d: &&RerankDecision| index[d.sentence_id.as_str()].gold_label(&d.unit);
    let b = metrics::sample_counts(hard.iter().map(|d| (gold_of(d), d.before_label.as_str())));
    let a = metrics::sample_counts(hard.iter().map(|d| (gold_of(d), d.after_label.as_str())));
    report.rerank_rows = Some(RerankRow {
        f1_before_on_reranked: b.f1(),
        f1_after_on_reranked: a.f1(),
        reranked: hard.len(),
        total: decisions.len(),
        reranked_ratio: if decisions.is_empty() {
            0.0
        } else {
            hard.len() as f64 / decisions.len() as f64
        },
    });
    Ok(report)
}

fn finish(mode: Mode, mut decisions: Vec<RerankDecision>, gold: &Dataset, rule: HeadRule, ledger: CostLedger) -> Result<RunOutput> {
    decisions.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let report = evaluate_decisions(&decisions, gold, rule)?;
    Ok(RunOutput {
        mode,
        predictions: decisions.iter().map(RerankDecision::after).collect(),
        parse: ParseCounts::from_decisions(&decisions),
        decisions,
        report,
        ledger,
        icl: None,
    })
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

pub fn run_filter_only(cfg: &RunConfig, inputs: &Inputs) -> Result<RunOutput> {
    let scores = inputs.scores()?;
    let decisions = scores
        .records
        .values()
        .map(|r| RerankDecision::easy(r, filter_argmax(r, &scores.schema), filtering::confidence(r)))
        .collect();
    finish(Mode::FilterOnly, decisions, &inputs.gold, cfg.head_rule, CostLedger::default())
}

fn is_hard(cfg: &RunConfig, rec: &ScoreRecord) -> bool {
    !cfg.ablations.adaptive || classify_difficulty(rec, &cfg.router) == Difficulty::Hard
}

fn candidates(cfg: &RunConfig, rec: &ScoreRecord, schema: &LabelSchema) -> CandidateSet {
    if cfg.ablations.label_filter {
        top_candidates(rec, &cfg.router, schema)
    } else {
        all_candidates(rec, schema)
    }
}

/// Chooses multiple-choice demos, in prompt order.
struct McqDemos<'a> {
    pool: &'a [DemoExample],
    fixed: Option<Vec<&'a DemoExample>>,
    k: usize,
    emb: Option<&'a EmbeddingTable>,
}

impl<'a> McqDemos<'a> {
    fn new(cfg: &RunConfig, inputs: &'a Inputs) -> Result<Self> {
        let k = cfg.demos_enabled();
        let pool = &inputs.demos[..];
        if k > pool.len() {
            return Err(RetrievalError::PoolTooSmall {
                k,
                available: pool.len(),
            }
            .into());
        }
        let by_id: HashMap<&str, &DemoExample> = pool.iter().map(|d| (d.demo_id.as_str(), d)).collect();
        let fixed = match cfg.demo_strategy {
            _ if k == 0 => Some(Vec::new()),
            DemoStrategy::Random => {
                let ids: Vec<String> = pool.iter().map(|d| d.demo_id.clone()).collect();
                Some(
                    retrieval::select_random_ids(&ids, k, cfg.seed)?
                        .iter()
                        .map(|id| by_id[id.as_str()])
                        .collect(),
                )
            }
            DemoStrategy::Embedding => None,
        };
        let emb = inputs.embeddings.as_ref();
        if fixed.is_none() && emb.is_none() {
            return Err(PipelineError::Config("embedding demo strategy needs paths.embeddings".into()));
        }
        Ok(Self { pool, fixed, k, emb })
    }

    fn for_sentence(&self, sentence_id: &str) -> Result<Vec<DemoExample>> {
        if let Some(f) = &self.fixed {
            return Ok(f.iter().map(|d| (*d).clone()).collect());
        }
        let emb = self.emb.expect("checked in new");
        let mut ids = retrieval::rank_by_embedding(self.pool.iter().map(|d| d.demo_id.as_str()), sentence_id, emb, self.k)?;
        ids.reverse();
        Ok(ids
            .iter()
            .map(|id| self.pool.iter().find(|d| &d.demo_id == id).expect("ranked id is in pool").clone())
            .collect())
    }
}

fn fatal(e: &LlmError) -> bool {
    matches!(e, LlmError::AuthFailure(_) | LlmError::Config(_) | LlmError::Cache { .. } | LlmError::InvalidRequest(_))
}

/// Renders, sends and parses the rerank question for one sample.
fn rerank_with_llm(
    cfg: &RunConfig,
    rec: &ScoreRecord,
    sentence: &SentenceRecord,
    cands: &CandidateSet,
    demos: &[DemoExample],
    tset: &TemplateSet,
    client: &LlmClient,
) -> Result<RerankDecision> {
    let schema = &tset.schema;
    let before = filter_argmax(rec, schema).to_string();
    let bundle = render_mcq(sentence, &rec.unit, cands, demos, tset, cfg.ablations.effective_cot(), cfg.choice_order)?;
    let req = GenRequest {
        prompt: bundle.text(),
        max_output_tokens: cfg.llm.max_output_tokens,
        temperature: cfg.llm.temperature,
        stop: cfg.llm.stop.clone(),
        model_id: cfg.llm.model_id(),
        hints: Some(MockHints {
            sample_id: rec.sample_id.clone(),
            choice_map: bundle.choice_map.clone(),
        }),
    };
    let mut d = RerankDecision {
        routed: Difficulty::Hard,
        ..RerankDecision::easy(rec, &before, cands.source_confidence)
    };
    match client.generate(&req) {
        Ok(res) => {
            let (label, status) = parse_mcq_answer(&res.text, &bundle);
            d.after_label = label;
            d.parse_status = Some(status);
            d.llm_latency_ms = Some(res.latency_ms);
            d.llm_tokens = Some(res.prompt_tokens + res.completion_tokens);
        }
        Err(e) if fatal(&e) => return Err(e.into()),
        Err(e) => {
            log::warn!("sample {}: {e}; keeping filter label", rec.sample_id);
            d.parse_status = Some(ParseStatus::Failed);
            d.llm_error = Some(e.to_string());
        }
    }
    Ok(d)
}

pub fn run_filter_then_rerank(cfg: &RunConfig, inputs: &Inputs, client: &LlmClient) -> Result<RunOutput> {
    let scores = inputs.scores()?;
    if scores.schema.task() == Task::Eae {
        return Err(PromptError::UnsupportedTask(Task::Eae).into());
    }
    let tset = inputs.templates()?;
    let demos = McqDemos::new(cfg, inputs)?;
    let index = inputs.gold.index();
    let start = client.ledger();
    let records: Vec<&ScoreRecord> = scores.records.values().collect();
    let decisions = client
        .map_parallel(&records, |rec| {
            let conf = filtering::confidence(rec);
            if !is_hard(cfg, rec) {
                return Ok(RerankDecision::easy(rec, filter_argmax(rec, &scores.schema), conf));
            }
            let sentence = index[rec.sentence_id.as_str()];
            let cands = candidates(cfg, rec, &scores.schema);
            let chosen = demos.for_sentence(&rec.sentence_id)?;
            rerank_with_llm(cfg, rec, sentence, &cands, &chosen, tset, client)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    finish(Mode::FilterThenRerank, decisions, &inputs.gold, cfg.head_rule, client.ledger().since(&start))
}

/// Hard samples are re-decided by a second filter restricted to the
/// candidate set; no LLM involved.
pub fn run_slm_rerank_baseline(cfg: &RunConfig, inputs: &Inputs) -> Result<RunOutput> {
    let scores = inputs.scores()?;
    let other = inputs
        .slm_scores
        .as_ref()
        .ok_or_else(|| PipelineError::Config("no slm_scores loaded".into()))?;
    let decisions = scores
        .records
        .values()
        .map(|rec| {
            let before = filter_argmax(rec, &scores.schema);
            let conf = filtering::confidence(rec);
            let mut d = RerankDecision::easy(rec, before, conf);
            if is_hard(cfg, rec) {
                d.routed = Difficulty::Hard;
                d.after_label = slm_rerank(&candidates(cfg, rec, &scores.schema), other)?.label;
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    finish(Mode::SlmRerankBaseline, decisions, &inputs.gold, cfg.head_rule, CostLedger::default())
}

/// Queries posed for one test sentence.
fn icl_queries(task: Task, sentence: &SentenceRecord, scores: Option<&ScoreTable>) -> Vec<IclQuery> {
    if task == Task::Re {
        if let Some(t) = scores {
            let mut out: Vec<IclQuery> = Vec::new();
            for r in t.records.values().filter(|r| r.sentence_id == sentence.sentence_id) {
                if let Unit::Relation { subj, obj } = r.unit {
                    let q = IclQuery::Pair { subj, obj };
                    if !out.contains(&q) {
                        out.push(q);
                    }
                }
            }
            return out;
        }
    }
    IclQuery::from_gold(task, sentence)
}

fn query_id(sentence_id: &str, i: usize) -> String {
    format!("{sentence_id}#{i}")
}

/// Gold serialization for every test query, keyed by query id.
pub fn icl_gold_replies(inputs: &Inputs) -> HashMap<String, String> {
    let task = inputs.gold.schema.task();
    let mut out = HashMap::new();
    for s in &inputs.gold.sentences {
        for (i, q) in icl_queries(task, s, inputs.scores.as_ref()).iter().enumerate() {
            out.insert(query_id(&s.sentence_id, i), prompting::serialize_icl_answer(task, s, q));
        }
    }
    out
}

pub fn run_icl_baseline(cfg: &RunConfig, inputs: &Inputs, client: &LlmClient) -> Result<RunOutput> {
    let gold = &inputs.gold;
    let schema = &gold.schema;
    let task = schema.task();
    let bare = TemplateSet::bare(schema);
    let tset = inputs.templates.as_ref().unwrap_or(&bare);
    if let Some(s) = &inputs.scores {
        check_coverage(s, gold)?;
    }

    let k = cfg.demos_enabled();
    let pool: Vec<(&SentenceRecord, IclQuery)> = match (&inputs.demo_pool, k) {
        (_, 0) => Vec::new(),
        (None, _) => return Err(PipelineError::Config("no demo_pool loaded".into())),
        (Some(p), _) => p
            .sentences
            .iter()
            .filter_map(|s| IclQuery::from_gold(task, s).into_iter().next().map(|q| (s, q)))
            .collect(),
    };
    let pool_ids: Vec<String> = pool.iter().map(|(s, _)| s.sentence_id.clone()).collect();
    let fixed: Option<Vec<usize>> = match cfg.demo_strategy {
        _ if k == 0 => Some(Vec::new()),
        DemoStrategy::Random => {
            let ids = retrieval::select_random_ids(&pool_ids, k, cfg.seed)?;
            Some(ids.iter().map(|id| pool_ids.iter().position(|p| p == id).unwrap()).collect())
        }
        DemoStrategy::Embedding => None,
    };

    struct Job<'a> {
        sentence: &'a SentenceRecord,
        query: IclQuery,
        id: String,
    }
    let mut jobs = Vec::new();
    for s in &gold.sentences {
        for (i, q) in icl_queries(task, s, inputs.scores.as_ref()).into_iter().enumerate() {
            jobs.push(Job {
                sentence: s,
                query: q,
                id: query_id(&s.sentence_id, i),
            });
        }
    }

    let start = client.ledger();
    let results = client
        .map_parallel(&jobs, |job| -> Result<(Vec<Prediction>, IclDiagnostics)> {
            let picks: Vec<usize> = match &fixed {
                Some(f) => f.clone(),
                None => {
                    let emb = inputs
                        .embeddings
                        .as_ref()
                        .ok_or_else(|| PipelineError::Config("no embeddings loaded".into()))?;
                    let mut ids = retrieval::rank_by_embedding(
                        pool_ids.iter().map(String::as_str),
                        &job.sentence.sentence_id,
                        emb,
                        k,
                    )?;
                    ids.reverse();
                    ids.iter().map(|id| pool_ids.iter().position(|p| p == id).unwrap()).collect()
                }
            };
            let demos: Vec<IclDemo> = picks
                .iter()
                .map(|&i| IclDemo {
                    sentence: pool[i].0,
                    query: &pool[i].1,
                })
                .collect();
            let bundle = render_icl(job.sentence, &job.query, &demos, tset, cfg.instruction);
            let req = GenRequest {
                prompt: bundle.text(),
                max_output_tokens: cfg.llm.max_output_tokens,
                temperature: cfg.llm.temperature,
                stop: cfg.llm.stop.clone(),
                model_id: cfg.llm.model_id(),
                hints: Some(MockHints {
                    sample_id: job.id.clone(),
                    choice_map: Vec::new(),
                }),
            };
            let mut diag = IclDiagnostics {
                queries: 1,
                ..Default::default()
            };
            let text = match client.generate(&req) {
                Ok(r) => r.text,
                Err(e) if fatal(&e) => return Err(e.into()),
                Err(e) => {
                    log::warn!("query {}: {e}", job.id);
                    diag.llm_errors = 1;
                    return Ok((Vec::new(), diag));
                }
            };
            let parsed = parse_icl_answer(&text, task, schema);
            diag.unknown_labels = parsed.unknown_labels;
            diag.sentinel_replies = usize::from(parsed.sentinel);
            let mut preds: Vec<Prediction> = Vec::new();
            for (surface, label) in parsed.items {
                let unit = match &job.query {
                    IclQuery::Pair { subj, obj } => Unit::Relation { subj: *subj, obj: *obj },
                    q => {
                        let a = align_surface(&job.sentence.tokens, &surface);
                        diag.ambiguous_surfaces += usize::from(a.ambiguous);
                        let Some(span) = a.span else {
                            diag.unmatched_surfaces += 1;
                            continue;
                        };
                        match (task, q) {
                            (Task::Eae, IclQuery::Event { trigger, event }) => Unit::Argument {
                                trigger: *trigger,
                                event: event.clone(),
                                span,
                            },
                            (Task::Ed, _) => Unit::Trigger { span },
                            _ => Unit::Entity { span },
                        }
                    }
                };
                if preds.iter().any(|p| p.unit == unit && p.label == label) {
                    continue;
                }
                preds.push(Prediction {
                    sample_id: format!("{}/{}", job.id, preds.len()),
                    sentence_id: job.sentence.sentence_id.clone(),
                    unit,
                    label,
                    confidence: 1.0,
                });
            }
            Ok((preds, diag))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut predictions = Vec::new();
    let mut diag = IclDiagnostics::default();
    for (p, d) in results {
        predictions.extend(p);
        diag.queries += d.queries;
        diag.unknown_labels += d.unknown_labels;
        diag.unmatched_surfaces += d.unmatched_surfaces;
        diag.ambiguous_surfaces += d.ambiguous_surfaces;
        diag.sentinel_replies += d.sentinel_replies;
        diag.llm_errors += d.llm_errors;
    }
    predictions.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let report = score(&predictions, gold, cfg.head_rule)?;
    Ok(RunOutput {
        mode: Mode::IclBaseline,
        decisions: Vec::new(),
        predictions,
        report,
        ledger: client.ledger().since(&start),
        parse: ParseCounts::default(),
        icl: Some(diag),
    })
}

/// Runs whatever `cfg.mode` names.
pub fn run(cfg: &RunConfig, inputs: &Inputs, client: &LlmClient) -> Result<RunOutput> {
    match cfg.mode {
        Mode::FilterOnly => run_filter_only(cfg, inputs),
        Mode::FilterThenRerank => run_filter_then_rerank(cfg, inputs, client),
        Mode::SlmRerankBaseline => run_slm_rerank_baseline(cfg, inputs),
        Mode::IclBaseline => run_icl_baseline(cfg, inputs, client),
    }
}

// ---------------------------------------------------------------------------
// Tuning and ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub tau: f64,
    pub sweep: Vec<SweepPoint>,
    /// The reranker was the gold oracle, not the LLM.
    pub oracle: bool,
    pub ledger: CostLedger,
}

/// Gold if offered, else `None` if offered, else the first candidate.
pub fn oracle_choice(cands: &CandidateSet, gold: &str) -> String {
    [gold, NONE_LABEL]
        .iter()
        .find(|l| cands.candidates.iter().any(|c| c == *l))
        .map(|l| l.to_string())
        .unwrap_or_else(|| cands.candidates.first().cloned().unwrap_or_else(|| NONE_LABEL.to_string()))
}

/// Picks the threshold with the best validation F1. LLM answers go through
/// the client cache, so every validation sample costs at most one call.
pub fn tune(cfg: &RunConfig, inputs: &Inputs, client: &LlmClient) -> Result<TuneOutcome> {
    let vs = inputs
        .valid_scores
        .as_ref()
        .ok_or_else(|| PipelineError::Config("tuning needs paths.valid_scores".into()))?;
    let vg = inputs
        .valid_gold
        .as_ref()
        .ok_or_else(|| PipelineError::Config("tuning needs paths.valid_dataset".into()))?;
    check_coverage(vs, vg)?;
    let max_tau = cfg.router.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let needed: Vec<&ScoreRecord> = vs
        .records
        .values()
        .filter(|r| filtering::difficulty_at(filtering::confidence(r), max_tau) == Difficulty::Hard)
        .collect();
    let start = client.ledger();
    let labels: HashMap<String, String> = if cfg.tune_oracle {
        let gold = gold_labels(vs, vg);
        needed
            .iter()
            .map(|r| {
                let c = top_candidates(r, &cfg.router, &vs.schema);
                (r.sample_id.clone(), oracle_choice(&c, &gold[&r.sample_id]))
            })
            .collect()
    } else {
        let tset = inputs.templates()?;
        let demos = McqDemos::new(cfg, inputs)?;
        let index = vg.index();
        client
            .map_parallel(&needed, |r| {
                let c = top_candidates(r, &cfg.router, &vs.schema);
                let chosen = demos.for_sentence(&r.sentence_id)?;
                let d = rerank_with_llm(cfg, r, index[r.sentence_id.as_str()], &c, &chosen, tset, client)?;
                Ok((d.sample_id, d.after_label))
            })
            .into_iter()
            .collect::<Result<_>>()?
    };
    let sweep = filtering::threshold_sweep(vs, vg, |c| labels[&c.sample_id].clone(), &cfg.router)?;
    Ok(TuneOutcome {
        tau: filtering::best_point(&sweep).tau,
        sweep,
        oracle: cfg.tune_oracle,
        ledger: client.ledger().since(&start),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablations: Ablations,
    pub f1: f64,
    pub rerank: Option<RerankRow>,
    pub ledger: CostLedger,
}

/// The cumulative ablation ladder: full system, then CoT, Demo, label
/// filtering and adaptive routing switched off one after another.
pub fn ablation_ladder() -> Vec<Ablations> {
    let on = Ablations::default();
    vec![
        on,
        Ablations { cot: false, ..on },
        Ablations { cot: false, demo: false, ..on },
        Ablations {
            cot: false,
            demo: false,
            label_filter: false,
            adaptive: true,
        },
        Ablations {
            cot: false,
            demo: false,
            label_filter: false,
            adaptive: false,
        },
    ]
}

pub fn ablate(cfg: &RunConfig, inputs: &Inputs, client: &LlmClient) -> Result<Vec<AblationRow>> {
    ablation_ladder()
        .into_iter()
        .map(|a| {
            let c = RunConfig {
                ablations: a,
                mode: Mode::FilterThenRerank,
                ..cfg.clone()
            };
            let out = run_filter_then_rerank(&c, inputs, client)?;
            Ok(AblationRow {
                ablations: a,
                f1: out.report.f1,
                rerank: out.report.rerank_rows,
                ledger: out.ledger,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "on" } else { "off" };
    let mut out = String::from("cot\tdemo\tlf\tad\tf1\treranked\tcalls\tprompt_tokens\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}\t{}",
            mark(r.ablations.cot),
            mark(r.ablations.demo),
            mark(r.ablations.label_filter),
            mark(r.ablations.adaptive),
            r.f1,
            r.rerank.as_ref().map_or(0, |x| x.reranked),
            r.ledger.backend_calls(),
            r.ledger.total_prompt_tokens
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TSV: &str = "report.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// What `report` needs besides the decisions to rebuild the report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRecord {
    mode: Mode,
    ledger: CostLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    icl: Option<IclDiagnostics>,
    /// Effective config, command-line overrides included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    mode: Mode,
    ratio_basis: &'static str,
    report: &'a EvalReport,
    ledger: &'a CostLedger,
    parse: &'a ParseCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    icl: &'a Option<IclDiagnostics>,
    config: &'a RunConfig,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for x in items {
        serde_json::to_writer(&mut w, x).map_err(|e| PipelineError::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes decisions (or predictions), the run record, `report.json`,
/// `report.tsv` and `summary.txt` into `dir`.
pub fn write_reports(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    if out.mode == Mode::IclBaseline {
        write_jsonl(&dir.join(PREDICTIONS_FILE), &out.predictions)?;
    } else {
        write_jsonl(&dir.join(DECISIONS_FILE), &out.decisions)?;
    }
    let record = RunRecord {
        mode: out.mode,
        ledger: out.ledger,
        icl: out.icl,
        config: Some(cfg.clone()),
    };
    let mut text = serde_json::to_string_pretty(&record).map_err(|e| PipelineError::Data(e.to_string()))?;
    text.push('\n');
    write_text(&dir.join(RUN_FILE), &text)?;
    write_summaries(dir, cfg, out)
}

fn write_summaries(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    let json = ReportJson {
        mode: out.mode,
        ratio_basis: "samples",
        report: &out.report,
        ledger: &out.ledger,
        parse: &out.parse,
        icl: &out.icl,
        config: cfg,
    };
    let mut text = serde_json::to_string_pretty(&json).map_err(|e| PipelineError::Data(e.to_string()))?;
    text.push('\n');
    write_text(&dir.join(REPORT_JSON), &text)?;
    write_text(&dir.join(REPORT_TSV), &report_tsv(out))?;
    write_text(&dir.join(SUMMARY_FILE), &summary(out))
}

pub fn report_tsv(out: &RunOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode\t{}", serde_json::to_value(out.mode).unwrap().as_str().unwrap_or(""));
    s.push_str(&out.report.to_tsv());
    let l = &out.ledger;
    for (k, v) in [
        ("llm.total_calls", l.total_calls),
        ("llm.cached_hits", l.cached_hits),
        ("llm.backend_calls", l.backend_calls()),
        ("llm.failed_calls", l.failed_calls),
        ("llm.prompt_tokens", l.total_prompt_tokens),
        ("llm.completion_tokens", l.total_completion_tokens),
        ("llm.wall_ms", l.wall_ms),
    ] {
        let _ = writeln!(s, "{k}\t{v}");
    }
    if out.mode != Mode::IclBaseline {
        let p = &out.parse;
        let _ = writeln!(s, "parse.parsed\t{}", p.parsed);
        let _ = writeln!(s, "parse.parsed_fallback\t{}", p.parsed_fallback);
        let _ = writeln!(s, "parse.failed\t{}", p.failed);
        let _ = writeln!(s, "parse.llm_errors\t{}", p.llm_errors);
    }
    s
}

pub fn summary(out: &RunOutput) -> String {
    let r = &out.report;
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}", serde_json::to_value(out.mode).unwrap().as_str().unwrap_or(""));
    let _ = writeln!(
        s,
        "micro F1 {:.2}  (P {:.2}, R {:.2}; tp {} fp {} fn {})",
        r.f1 * 100.0,
        r.precision * 100.0,
        r.recall * 100.0,
        r.tp,
        r.fp,
        r.fn_
    );
    if let Some(rr) = &r.rerank_rows {
        let _ = writeln!(s);
        let _ = writeln!(s, "reranked samples (ratio over samples)");
        let _ = writeln!(s, "  reranked  {} of {} ({})", rr.reranked, rr.total, format_ratio(rr.reranked_ratio));
        let _ = writeln!(
            s,
            "  F1 before {:.2}  after {:.2}  delta {:+.2}",
            rr.f1_before_on_reranked * 100.0,
            rr.f1_after_on_reranked * 100.0,
            rr.delta() * 100.0
        );
    }
    if !r.bucket_rows.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "confidence buckets");
        let _ = writeln!(s, "  range        n      F1 before  F1 after  neg/pos");
        for b in &r.bucket_rows {
            let close = if b.upper >= 1.0 { ']' } else { ')' };
            let _ = writeln!(
                s,
                "  [{:.2},{:.2}{}  {:<6} {:>9.2}  {:>8.2}  {}",
                b.lower,
                b.upper,
                close,
                b.n,
                b.f1_before * 100.0,
                b.f1_after * 100.0,
                b.neg_pos_ratio.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
            );
        }
    }
    let l = &out.ledger;
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "llm: {} calls ({} cached, {} failed), {} prompt + {} completion tokens, {} ms",
        l.backend_calls(),
        l.cached_hits,
        l.failed_calls,
        l.total_prompt_tokens,
        l.total_completion_tokens,
        l.wall_ms
    );
    if out.mode != Mode::IclBaseline {
        let p = &out.parse;
        let _ = writeln!(
            s,
            "parse: {} parsed, {} fallback, {} failed, {} llm errors",
            p.parsed, p.parsed_fallback, p.failed, p.llm_errors
        );
    }
    if let Some(d) = &out.icl {
        let _ = writeln!(
            s,
            "icl: {} queries, {} unknown labels, {} unmatched and {} ambiguous surfaces, {} empty replies, {} llm errors",
            d.queries, d.unknown_labels, d.unmatched_surfaces, d.ambiguous_surfaces, d.sentinel_replies, d.llm_errors
        );
    }
    s
}

/// Rebuilds every report file from the saved decisions and run record. The
/// config saved with the run wins over `cfg`, so overrides given at run time
/// survive.
pub fn regenerate_reports(dir: &Path, cfg: &RunConfig, gold: &Dataset) -> Result<RunOutput> {
    let rec_path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&rec_path).map_err(io_err(&rec_path))?;
    let record: RunRecord = serde_json::from_str(&text).map_err(|e| PipelineError::Data(e.to_string()))?;
    let cfg = record.config.as_ref().unwrap_or(cfg);
    let out = if record.mode == Mode::IclBaseline {
        let predictions: Vec<Prediction> = read_jsonl(&dir.join(PREDICTIONS_FILE))?;
        RunOutput {
            mode: record.mode,
            decisions: Vec::new(),
            report: score(&predictions, gold, cfg.head_rule)?,
            predictions,
            ledger: record.ledger,
            parse: ParseCounts::default(),
            icl: record.icl,
        }
    } else {
        let decisions: Vec<RerankDecision> = read_jsonl(&dir.join(DECISIONS_FILE))?;
        finish(record.mode, decisions, gold, cfg.head_rule, record.ledger)?
    };
    write_summaries(dir, cfg, &out)?;
    Ok(out)
}

/// Sample ids by routing outcome, for quick inspection.
pub fn routed_ids(decisions: &[RerankDecision]) -> BTreeMap<&'static str, Vec<&str>> {
    let mut m: BTreeMap<&'static str, Vec<&str>> = BTreeMap::new();
    for d in decisions {
        let k = match d.routed {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        };
        m.entry(k).or_default().push(&d.sample_id);
    }
    m
}
