// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use knloc::dataset::{facts_to_jsonl, Fact};
use knloc::model::{generate_toy_checkpoint, ModelConfig};
use knloc::pipeline::RunConfig;

const SUBJECTS: [&str; 12] = [
    "Ada", "Boris", "Chen", "Dana", "Emil", "Fatma", "Goran", "Hana", "Ivo", "Jun", "Kemal", "Lena",
];
// The toy vocabulary only merges " t", so objects alternate between a " t"
// first token and a bare space to give update edits a replacement object.
const OBJECTS: [&str; 6] = ["pilot", "tailor", "nurse", "tutor", "baker", "tamer"];
const TEMPLATES: [[&str; 3]; 2] = [
    ["[X] works as a", "[X] is employed as a", "The job of [X] is [Y]."],
    ["[X] was born in", "[X] comes from [Y].", "The birthplace of [X] is"],
];
const PLACES: [&str; 4] = ["Oslo", "toledo", "Lima", "tunis"];

/// `n` two-relation toy facts with three templates each.
pub fn toy_facts(n: usize) -> Vec<Fact> {
    (0..n)
        .map(|i| {
            let r = i % 2;
            Fact {
                fact_id: format!("R{r}-{i}"),
                relation: format!("R{r}"),
                subject: SUBJECTS[i % SUBJECTS.len()].to_string(),
                object: if r == 0 { OBJECTS[(i / 2) % OBJECTS.len()] } else { PLACES[(i / 2) % PLACES.len()] }.to_string(),
                templates: TEMPLATES[r].iter().map(|s| s.to_string()).collect(),
            }
        })
        .collect()
}

pub const EVAL_TEXT: &str = "the pilot flew over the lake at dawn.\n\nan old baker sold bread in the square.\n\nthe judge read the letter twice.\n\nwind moved the reeds near the shore.\n\na miner came home late that night.\n";

/// Writes a toy checkpoint, fact file and eval text under `dir` and returns
/// a config pointing at them with `output_dir = "run"`.
pub fn toy_workspace(dir: &Path, n_facts: usize) -> RunConfig {
    let ckpt = dir.join("checkpoint");
    generate_toy_checkpoint(&ModelConfig::toy(), 42, &ckpt).unwrap();
    let facts = dir.join("facts.jsonl");
    fs::write(&facts, facts_to_jsonl(&toy_facts(n_facts))).unwrap();
    let eval = dir.join("eval.txt");
    fs::write(&eval, EVAL_TEXT).unwrap();
    RunConfig {
        checkpoint_path: ckpt,
        facts_path: facts,
        eval_texts_path: Some(eval),
        steps: 8,
        unrelated_count: 4,
        ppl_samples: 3,
        sequential_runs: 2,
        heatmap_facts: 1,
        ..RunConfig::default()
    }
}

/// Every file under `root`, relative and sorted.
pub fn files_under(root: &Path) -> Vec<PathBuf> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push(p.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out.sort();
    out
}
