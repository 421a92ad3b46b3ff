//! Seeded synthetic fixtures: gold NER data, filter score tables with a
//! controlled error pattern, matching templates, demos and embeddings.
//!
//! Each sentence holds `per_sentence` single-token candidate entities
//! separated by filler tokens. Every candidate is one scored sample; a share
//! of them are gold negatives. Confidences are multiples of `1/200`, so the
//! threshold grid never sits on a sample's confidence except where chosen.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Annotation, Dataset, LabelSchema, SentenceRecord, Span, SplitTag, Task, Unit, NONE_LABEL};
use crate::filtering::{ScoreRecord, ScoreTable};
use crate::prompting::{DemoExample, TemplateSet};
use crate::retrieval::EmbeddingTable;
use crate::rng;

/// Confidences are `step / CONF_DENOM`.
pub const CONF_DENOM: u32 = 200;

/// Where the filter goes wrong. A wrong sample always keeps the gold label
/// as its second most probable label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorModel {
    /// Wrong exactly when confidence is below the bound.
    BelowThreshold(f64),
    /// Wrong with this probability, independent of confidence.
    Rate(f64),
    Never,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub per_sentence: usize,
    pub n_labels: usize,
    pub neg_fraction: f64,
    /// Share of samples drawn from `low_steps` rather than `high_steps`.
    pub low_fraction: f64,
    /// Inclusive step range (over `CONF_DENOM`) for low-confidence samples.
    /// The first low sample always gets the top of the range.
    pub low_steps: (u32, u32),
    pub high_steps: (u32, u32),
    pub errors: ErrorModel,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            per_sentence: 5,
            n_labels: 6,
            neg_fraction: 0.3,
            low_fraction: 0.2,
            low_steps: (80, 119),
            high_steps: (121, 200),
            errors: ErrorModel::Rate(0.2),
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Filter wrong exactly on the confidence < 0.6 stratum, gold always
    /// second, confidences reaching 0.595.
    pub fn below_threshold(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            errors: ErrorModel::BelowThreshold(0.6),
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub gold: Dataset,
    pub scores: ScoreTable,
    pub templates: TemplateSet,
    pub demos: Vec<DemoExample>,
    /// Vectors for every sentence id and every demo id.
    pub embeddings: EmbeddingTable,
}

pub fn label_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("L{i}")).collect()
}

pub fn schema(n_labels: usize) -> LabelSchema {
    LabelSchema::new(Task::Ner, label_names(n_labels)).expect("synthetic labels are valid")
}

/// Template file text for the synthetic labels.
pub fn template_toml(n_labels: usize) -> String {
    let mut out = String::from(
        "task = \"NER\"\nnone = \"{ent} is not a named entity.\"\n",
    );
    for l in label_names(n_labels) {
        out.push_str(&format!(
            "\n[[label]]\nname = \"{l}\"\ntemplate = \"{{ent}} is a kind of {l}.\"\n"
        ));
    }
    out
}

pub fn templates(schema: &LabelSchema) -> TemplateSet {
    TemplateSet::parse(&template_toml(schema.labels().len()), Some(schema))
        .expect("synthetic templates are valid")
}

fn step_conf(step: u32) -> f64 {
    f64::from(step) / f64::from(CONF_DENOM)
}

pub fn fixture(cfg: &SynthConfig) -> Fixture {
    assert!(cfg.n_labels >= 3, "need at least three labels");
    assert!(cfg.per_sentence >= 1);
    let schema = schema(cfg.n_labels);
    let labels = schema.labels().to_vec();
    let mut all: Vec<String> = labels.clone();
    all.push(NONE_LABEL.to_string());

    let mut r = rng::seeded(cfg.seed, "synth");
    let n = cfg.n_samples;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let n_low = (cfg.low_fraction * n as f64).round() as usize;
    let mut is_low = vec![false; n];
    for &i in &order[..n_low.min(n)] {
        is_low[i] = true;
    }
    let first_low = (0..n).find(|&i| is_low[i]);

    let mut sentences: Vec<SentenceRecord> = Vec::new();
    let mut records = Vec::with_capacity(n);
    for (i, &low) in is_low.iter().enumerate() {
        let sent_idx = i / cfg.per_sentence;
        let slot = i % cfg.per_sentence;
        if slot == 0 {
            let mut tokens = Vec::with_capacity(2 * cfg.per_sentence);
            for k in 0..cfg.per_sentence {
                tokens.push(format!("Name{sent_idx}x{k}"));
                tokens.push("and".to_string());
            }
            sentences.push(SentenceRecord {
                sentence_id: format!("s{sent_idx:05}"),
                tokens,
                annotations: Vec::new(),
            });
        }
        let span = Span::new(2 * slot, 2 * slot + 1);
        let unit = Unit::Entity { span };

        let gold = if r.gen_bool(cfg.neg_fraction) {
            NONE_LABEL.to_string()
        } else {
            labels[r.gen_range(0..labels.len())].clone()
        };
        if gold != NONE_LABEL {
            sentences
                .last_mut()
                .expect("sentence exists")
                .annotations
                .push(Annotation {
                    unit: unit.clone(),
                    label: gold.clone(),
                });
        }

        let step = if Some(i) == first_low {
            cfg.low_steps.1
        } else if low {
            r.gen_range(cfg.low_steps.0..=cfg.low_steps.1)
        } else {
            r.gen_range(cfg.high_steps.0..=cfg.high_steps.1)
        };
        let conf = step_conf(step);
        let wrong = match cfg.errors {
            ErrorModel::BelowThreshold(t) => conf < t,
            ErrorModel::Rate(p) => r.gen_bool(p),
            ErrorModel::Never => false,
        };

        let others: Vec<&String> = all.iter().filter(|l| **l != gold).collect();
        let mut ranked: Vec<String> = Vec::with_capacity(4);
        if wrong {
            ranked.push(others[r.gen_range(0..others.len())].clone());
            ranked.push(gold.clone());
        } else {
            ranked.push(gold.clone());
        }
        let mut rest: Vec<&String> = all.iter().filter(|l| !ranked.contains(l)).collect();
        rest.shuffle(&mut r);
        ranked.extend(rest.into_iter().take(4 - ranked.len()).cloned());

        let remainder = 1.0 - conf;
        let mut probs = BTreeMap::new();
        probs.insert(ranked[0].clone(), conf);
        if remainder > 0.0 {
            for (label, share) in ranked[1..].iter().zip([0.5, 0.3, 0.2]) {
                probs.insert(label.clone(), remainder * share);
            }
        }
        records.push(ScoreRecord {
            sample_id: format!("x{i:06}"),
            sentence_id: sentences.last().expect("sentence exists").sentence_id.clone(),
            unit,
            probs,
        });
    }

    let gold = Dataset::new(schema.clone(), sentences, SplitTag::Test).expect("synthetic data is valid");
    let scores = ScoreTable::new(schema.clone(), records, "synthetic").expect("synthetic scores are valid");
    let templates = templates(&schema);
    let demos = demos(&schema, &templates, cfg.seed);

    let mut ids: Vec<String> = gold.sentences.iter().map(|s| s.sentence_id.clone()).collect();
    ids.extend(demos.iter().map(|d| d.demo_id.clone()));
    let embeddings = embeddings(&ids, 8, cfg.seed);

    Fixture {
        gold,
        scores,
        templates,
        demos,
        embeddings,
    }
}

/// Four worked demos over the synthetic labels, each with an analysis.
pub fn demos(schema: &LabelSchema, tset: &TemplateSet, seed: u64) -> Vec<DemoExample> {
    let labels = schema.labels();
    let mut r = rng::seeded(seed, "synth-demos");
    (0..4)
        .map(|i| {
            let gold = if i == 3 {
                NONE_LABEL.to_string()
            } else {
                labels[r.gen_range(0..labels.len())].clone()
            };
            let unit = Unit::Entity { span: Span::new(1, 2) };
            let sentence = SentenceRecord {
                sentence_id: format!("demo{i}"),
                tokens: vec!["Yesterday".into(), format!("Sample{i}"), "arrived".into()],
                annotations: if gold == NONE_LABEL {
                    vec![]
                } else {
                    vec![Annotation {
                        unit: unit.clone(),
                        label: gold.clone(),
                    }]
                },
            };
            let mut cands: Vec<String> = labels
                .iter()
                .filter(|l| **l != gold)
                .take(2)
                .cloned()
                .collect();
            cands.insert((i % 3) as usize, gold.clone());
            if gold != NONE_LABEL {
                cands.push(NONE_LABEL.to_string());
            }
            let mut d = DemoExample::from_gold(format!("demo{i}"), &sentence, &unit, &cands, tset)
                .expect("synthetic demo renders");
            d.analysis = Some(format!(
                "The context around Sample{i} points to {}.",
                if gold == NONE_LABEL { "no entity" } else { gold.as_str() }
            ));
            d
        })
        .collect()
}

/// Random non-zero vectors with small integer components.
pub fn embeddings(ids: &[String], dim: usize, seed: u64) -> EmbeddingTable {
    let mut r = rng::seeded(seed, "synth-embed");
    let vectors = ids
        .iter()
        .map(|id| {
            let mut v: Vec<f64> = (0..dim).map(|_| f64::from(r.gen_range(-5i32..=5))).collect();
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
            (id.clone(), v)
        })
        .collect();
    EmbeddingTable::new(dim, vectors).expect("synthetic embeddings are valid")
}
