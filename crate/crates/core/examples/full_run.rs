// SPDX-License-Identifier: MIT OR Apache-2.0

//! Every pipeline command over a small toy fact file, as the `knloc` binary
//! would run them. Prints the final report.
//!
//! `cargo run --release --example full_run [-- <output dir>]`

use std::fs;
use std::path::PathBuf;

use knloc::attribution::Method;
use knloc::dataset::{facts_to_jsonl, Fact};
use knloc::editing::{EditMode, Selection};
use knloc::model::{generate_toy_checkpoint, ModelConfig};
use knloc::pipeline::{self, InterveneTarget, RunConfig, RunContext};

fn facts() -> Vec<Fact> {
    let people = ["Ada", "Boris", "Chen", "Dana", "Emil", "Fatma", "Goran", "Hana"];
    let jobs = ["tailor", "pilot", "tutor", "nurse"];
    let places = ["toledo", "Oslo", "tunis", "Lima"];
    people
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (relation, object, templates) = if i % 2 == 0 {
                ("job", jobs[i / 2 % 4], ["[X] works as a", "[X] is employed as a", "The job of [X] is"])
            } else {
                ("born", places[i / 2 % 4], ["[X] was born in", "[X] comes from", "The birthplace of [X] is"])
            };
            Fact {
                fact_id: format!("{relation}-{i}"),
                relation: relation.into(),
                subject: p.to_string(),
                object: object.into(),
                templates: templates.iter().map(|t| t.to_string()).collect(),
            }
        })
        .collect()
}

fn main() -> knloc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    generate_toy_checkpoint(&ModelConfig::toy(), 42, &root.join("checkpoint"))?;
    fs::write(root.join("facts.jsonl"), facts_to_jsonl(&facts())).expect("write facts");
    fs::write(root.join("eval.txt"), "the pilot flew over the lake.\n\nan old tailor sold coats.\n").expect("write eval");

    let cfg = RunConfig {
        checkpoint_path: root.join("checkpoint"),
        facts_path: root.join("facts.jsonl"),
        eval_texts_path: Some(root.join("eval.txt")),
        methods: vec![Method::Ig, Method::Amig],
        unrelated_count: 3,
        ppl_samples: 2,
        sequential_facts: 4,
        sequential_runs: 2,
        ..RunConfig::default()
    };
    let mut ctx = RunContext::open(cfg.clone(), cfg.resolved_output_dir(Some(&root)))?;
    let mut summaries = vec![
        pipeline::cmd_localize(&ctx)?,
        pipeline::cmd_consistency(&ctx)?,
        pipeline::cmd_intervene(&ctx, InterveneTarget::Both)?,
    ];
    for (mode, sel) in [(EditMode::Erase, Selection::NI), (EditMode::Erase, Selection::NU), (EditMode::Update, Selection::Cas)] {
        summaries.push(pipeline::cmd_edit(&mut ctx, mode, sel, false)?);
    }
    summaries.push(pipeline::cmd_edit(&mut ctx, EditMode::Erase, Selection::NI, true)?);
    summaries.push(pipeline::cmd_report(&ctx)?);
    for s in &summaries {
        println!("{:<12} processed {:<3} skipped {:<3} failures {}", s.command, s.processed, s.skipped, s.failures.len());
    }
    println!("\n{}", fs::read_to_string(ctx.out.join("report/report.md")).expect("report"));
    Ok(())
}
