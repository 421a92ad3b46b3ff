//! Adaptive filter-then-rerank for few-shot information extraction.
//!
//! A small supervised model (the *filter*) scores every candidate unit of a
//! sentence. Units whose top probability exceeds a threshold keep the filter's
//! answer; the rest are rewritten as multiple-choice questions over the
//! filter's top candidates and handed to an LLM (the *reranker*).
//!
//! Module map:
//!
//! - [`corpus`]: unified dataset format, K-shot sampling, negative balancing,
//!   test downsampling.
//! - [`metrics`]: micro-F1, head-F1, confidence buckets.
//! - [`filtering`]: score tables, confidence, routing, candidates, ensembling,
//!   threshold tuning.
//! - [`prompting`]: multiple-choice and plain in-context prompts, answer
//!   parsing.
//! - [`retrieval`]: demonstration selection.
//! - [`llm_client`]: chat-completions transport, mock, cache, ledger.
//! - [`pipeline`]: end-to-end runs, ablations and reports.
//! - [`synth`]: deterministic synthetic fixtures.

pub mod corpus;
pub mod filtering;
pub mod llm_client;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod synth;

mod rng;

pub use corpus::{
    Annotation, Dataset, LabelSchema, SamplerConfig, SentenceRecord, Span, SplitTag, Task, Unit,
    NONE_LABEL,
};
pub use filtering::{CandidateSet, Difficulty, RouterConfig, ScoreRecord, ScoreTable};
pub use metrics::{EvalReport, Prediction};
pub use llm_client::{CostLedger, GenRequest, GenResult, LlmClient, MockLlm, MockPolicy};
pub use prompting::{DemoExample, ParseStatus, PromptBundle, TemplateSet};
pub use retrieval::EmbeddingTable;
pub use pipeline::{RerankDecision, RunConfig};
