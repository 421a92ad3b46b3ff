//! Fixtures shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use std::path::PathBuf;

use serde::Deserialize;

use ftrank::filtering::CandidateSet;
use ftrank::prompting::{render_mcq, ChoiceOrder, ParseStatus, PromptBundle};
use ftrank::{LabelSchema, SentenceRecord, Span, TemplateSet, Unit};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn load_templates(dataset: &str) -> (LabelSchema, TemplateSet) {
    let dir = data_dir().join("templates");
    let schema = LabelSchema::load(&dir.join(format!("{dataset}.schema.json"))).unwrap();
    let tset = TemplateSet::load(&dir.join(format!("{dataset}.toml")), &schema).unwrap();
    (schema, tset)
}

fn sentence(text: &str) -> SentenceRecord {
    SentenceRecord {
        sentence_id: "golden".into(),
        tokens: text.split(' ').map(str::to_string).collect(),
        annotations: vec![],
    }
}

fn cands(labels: &[&str]) -> CandidateSet {
    CandidateSet {
        sample_id: "golden".into(),
        candidates: labels.iter().map(|l| l.to_string()).collect(),
        source_confidence: 0.5,
    }
}

/// The three template fixtures: dataset, sentence, unit, candidates.
fn template_cases() -> Vec<(&'static str, &'static str, Unit, Vec<&'static str>)> {
    vec![
        (
            "fewnerd",
            "Bob Dylan wrote Tarantula in 1966 .",
            Unit::Entity { span: Span::new(0, 2) },
            vec!["person-artist/author", "person-actor", "person-other", "None"],
        ),
        (
            "tacrev",
            "HSBC chairman Douglas Flint said on Monday .",
            Unit::Relation {
                subj: Span::new(2, 4),
                obj: Span::new(1, 2),
            },
            vec!["per:title", "per:employee_of", "None"],
        ),
        (
            "ace05",
            "Ebbers failed to repay the loan on time .",
            Unit::Trigger { span: Span::new(5, 6) },
            vec!["Transaction.Transfer-Money", "Transaction.Transfer-Ownership", "None"],
        ),
    ]
}

/// Rendered questions for the template fixtures, in the golden file layout.
pub fn render_template_cases() -> String {
    let mut out = String::new();
    for (dataset, text, unit, labels) in template_cases() {
        let (_, tset) = load_templates(dataset);
        let b = render_mcq(&sentence(text), &unit, &cands(&labels), &[], &tset, false, ChoiceOrder::AsGiven).unwrap();
        out.push_str(&format!("== {dataset}\n{}\n", b.question));
    }
    out
}

/// Question the canned parse corpus answers. The filter's top label is
/// `person-actor`.
pub fn parse_bundle() -> PromptBundle {
    let (_, tset) = load_templates("fewnerd");
    render_mcq(
        &sentence("Bob Dylan wrote Tarantula in 1966 ."),
        &Unit::Entity { span: Span::new(0, 2) },
        &cands(&["person-actor", "person-artist/author", "person-other", "None"]),
        &[],
        &tset,
        false,
        ChoiceOrder::AsGiven,
    )
    .unwrap()
}

#[derive(Debug, Deserialize)]
pub struct ParseCase {
    pub response: String,
    pub label: String,
    pub status: ParseStatus,
}

pub fn parse_cases() -> Vec<ParseCase> {
    std::fs::read_to_string(golden("parse_cases.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
