// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fact files, neighbor-query expansion and evaluation text.
//!
//! A fact file holds one JSON object per line:
//!
//! ```text
//! {"fact_id": "P39-0", "relation": "P39", "subject": "Adrian IV", "object": "pope",
//!  "templates": ["[X] has the position of", "[X] holds the position of [Y]."]}
//! ```
//!
//! `[X]` marks the subject. A trailing `[Y]` or `[MASK]` slot (optionally
//! followed by punctuation) is cut off so every query ends right before the
//! answer; templates with the slot anywhere else are dropped.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KnError, Result};
use crate::model::{Model, Scalar};

pub const SUBJECT_SLOT: &str = "[X]";
const ANSWER_SLOTS: [&str; 2] = ["[Y]", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub fact_id: String,
    pub relation: String,
    pub subject: String,
    pub object: String,
    pub templates: Vec<String>,
}

/// One neighbor query of a fact, tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub fact_id: String,
    pub query_index: usize,
    pub text: String,
    pub token_ids: Vec<u32>,
    pub answer_token: u32,
    pub answer_is_multitoken: bool,
}

impl QueryInstance {
    /// `fact_id/query_index`, the key of per-query output files.
    pub fn key(&self) -> String {
        format!("{}/{}", self.fact_id, self.query_index)
    }
}

/// Counts of records and templates removed while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub facts_dropped: usize,
    pub templates_dropped: usize,
}

/// Cuts a trailing answer slot. `None` when a slot sits inside the template.
pub fn normalize_template(template: &str) -> Option<String> {
    let mut t = template.trim().to_string();
    for slot in ANSWER_SLOTS {
        if let Some(at) = t.find(slot) {
            let rest = &t[at + slot.len()..];
            if rest.chars().any(|c| c.is_alphanumeric()) {
                return None;
            }
            t.truncate(at);
            t = t.trim_end().to_string();
        }
    }
    (!t.is_empty()).then_some(t)
}

/// Parses a fact file. Facts left with fewer than two usable templates are
/// dropped and counted; malformed lines and duplicate ids are errors.
pub fn parse_facts(text: &str, source: &str) -> Result<(Vec<Fact>, LoadReport)> {
    let mut facts = Vec::new();
    let mut seen = BTreeSet::new();
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{source}:{}", i + 1);
        let mut fact: Fact = serde_json::from_str(line).map_err(|e| KnError::parse(ctx(), e))?;
        for (name, v) in [("fact_id", &fact.fact_id), ("relation", &fact.relation), ("subject", &fact.subject), ("object", &fact.object)] {
            if v.trim().is_empty() {
                return Err(KnError::parse(ctx(), format!("empty {name}")));
            }
        }
        if !seen.insert(fact.fact_id.clone()) {
            return Err(KnError::parse(ctx(), format!("duplicate fact_id {:?}", fact.fact_id)));
        }
        let before = fact.templates.len();
        fact.templates = fact.templates.iter().filter_map(|t| normalize_template(t)).collect();
        report.templates_dropped += before - fact.templates.len();
        if fact.templates.len() < 2 {
            report.facts_dropped += 1;
            continue;
        }
        facts.push(fact);
    }
    if report.facts_dropped > 0 || report.templates_dropped > 0 {
        warn!(
            "{source}: dropped {} facts with fewer than 2 templates and {} templates with an internal answer slot",
            report.facts_dropped, report.templates_dropped
        );
    }
    Ok((facts, report))
}

pub fn load_facts(path: &Path) -> Result<(Vec<Fact>, LoadReport)> {
    if !path.exists() {
        return Err(KnError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| KnError::io(path, e))?;
    parse_facts(&text, &path.display().to_string())
}

pub fn facts_to_jsonl(facts: &[Fact]) -> String {
    facts
        .iter()
        .map(|f| serde_json::to_string(f).expect("fact serializes") + "\n")
        .collect()
}

/// First token of `" " + object` and whether the object needs more tokens.
pub fn answer_token<T: Scalar>(model: &Model<T>, object: &str) -> Result<(u32, bool)> {
    let ids = model.tokenize(&format!(" {}", object.trim()))?;
    match ids.first() {
        Some(&id) => Ok((id, ids.len() > 1)),
        None => Err(KnError::InvalidInput(format!("object {object:?} tokenizes to nothing"))),
    }
}

/// One query per template with the subject substituted.
pub fn expand_neighbors<T: Scalar>(fact: &Fact, model: &Model<T>) -> Result<Vec<QueryInstance>> {
    let (answer, multi) = answer_token(model, &fact.object)?;
    fact.templates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if !t.contains(SUBJECT_SLOT) {
                return Err(KnError::InvalidInput(format!(
                    "template {i} of fact {} has no {SUBJECT_SLOT} slot",
                    fact.fact_id
                )));
            }
            let text = t.replace(SUBJECT_SLOT, &fact.subject).trim_end().to_string();
            Ok(QueryInstance {
                fact_id: fact.fact_id.clone(),
                query_index: i,
                token_ids: model.tokenize(&text)?,
                text,
                answer_token: answer,
                answer_is_multitoken: multi,
            })
        })
        .collect()
}

/// First queries of `n` distinct facts whose relation differs from `exclude`'s.
pub fn sample_unrelated<T: Scalar>(
    facts: &[Fact],
    exclude: &Fact,
    n: usize,
    seed: u64,
    model: &Model<T>,
) -> Result<Vec<QueryInstance>> {
    let pool: Vec<&Fact> = facts.iter().filter(|f| f.relation != exclude.relation).collect();
    if pool.len() < n {
        return Err(KnError::InvalidInput(format!(
            "only {} facts outside relation {}, need {n}",
            pool.len(),
            exclude.relation
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter()
        .map(|j| {
            expand_neighbors(pool[j], model)?
                .into_iter()
                .next()
                .ok_or_else(|| KnError::InvalidInput("fact without templates".into()))
        })
        .collect()
}

/// Documents of an evaluation-text file: blank-line-separated blocks.
pub fn parse_eval_texts(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    docs
}

pub fn load_eval_texts(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(KnError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| KnError::io(path, e))?;
    Ok(parse_eval_texts(&text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::toy_model;

    fn fact(id: &str, rel: &str, templates: &[&str]) -> Fact {
        Fact {
            fact_id: id.into(),
            relation: rel.into(),
            subject: "Adrian IV".into(),
            object: "pope".into(),
            templates: templates.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn template_normalization() {
        assert_eq!(normalize_template("[X] holds the position of [Y]."), Some("[X] holds the position of".into()));
        assert_eq!(normalize_template("The capital of [X] is [MASK]"), Some("The capital of [X] is".into()));
        assert_eq!(normalize_template("[X] has the position of"), Some("[X] has the position of".into()));
        assert_eq!(normalize_template("[X] plays in [MASK] position."), None);
    }

    #[test]
    fn loading_rules() {
        assert_eq!(parse_facts("", "f").unwrap().0, vec![]);
        let one = facts_to_jsonl(&[fact("a", "P1", &["[X] is"])]);
        let (f, r) = parse_facts(&one, "f").unwrap();
        assert!(f.is_empty());
        assert_eq!(r.facts_dropped, 1);
        let two = facts_to_jsonl(&[fact("a", "P1", &["[X] is", "[X] was"]), fact("a", "P1", &["[X] is", "[X] was"])]);
        let err = parse_facts(&two, "f").unwrap_err().to_string();
        assert!(err.contains("f:2") && err.contains("duplicate"));
        let err = parse_facts("{\"fact_id\": 1}\n", "f").unwrap_err().to_string();
        assert!(err.contains("f:1"));
        let ok = facts_to_jsonl(&[fact("a", "P1", &["[X] is", "[X] was"])]);
        assert_eq!(parse_facts(&ok, "f").unwrap(), parse_facts(&ok, "f").unwrap());
    }

    #[test]
    fn expansion() {
        let m = toy_model(1);
        let f = Fact {
            subject: "France".into(),
            object: "Paris".into(),
            ..fact("c", "P36", &["The capital of [X] is", "[X] has its capital at", "[X]'s capital is"])
        };
        let q = expand_neighbors(&f, &m).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q[0].text, "The capital of France is");
        assert_eq!(q[0].token_ids, m.tokenize("The capital of France is").unwrap());
        assert_eq!(q[0].answer_token, m.tokenize(" Paris").unwrap()[0]);
        assert!(q[0].answer_is_multitoken);
        assert_eq!(q[2].key(), "c/2");
        let bad = fact("d", "P1", &["no slot here", "[X] x"]);
        assert!(expand_neighbors(&bad, &m).is_err());
    }

    #[test]
    fn unrelated_sampling() {
        let m = toy_model(1);
        let facts: Vec<Fact> = (0..8)
            .map(|i| fact(&format!("f{i}"), if i % 2 == 0 { "P1" } else { "P2" }, &["[X] is", "[X] was"]))
            .collect();
        assert!(sample_unrelated(&facts, &facts[0], 0, 3, &m).unwrap().is_empty());
        let a = sample_unrelated(&facts, &facts[0], 3, 3, &m).unwrap();
        assert_eq!(a, sample_unrelated(&facts, &facts[0], 3, 3, &m).unwrap());
        let ids: BTreeSet<_> = a.iter().map(|q| q.fact_id.clone()).collect();
        assert_eq!(ids.len(), 3);
        assert!(a.iter().all(|q| facts.iter().find(|f| f.fact_id == q.fact_id).unwrap().relation == "P2"));
        assert!(sample_unrelated(&facts, &facts[0], 5, 3, &m).is_err());
    }

    #[test]
    fn eval_text_blocks() {
        let docs = parse_eval_texts("first doc\nline two\n\n\n second\n\n");
        assert_eq!(docs, vec!["first doc\nline two".to_string(), " second".into()]);
        assert!(parse_eval_texts("").is_empty());
    }
}
