// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use knloc::attribution::Method;
use knloc::consistency::{SWEEP_HEADER, TABLE_HEADER, VIOLIN_HEADER};
use knloc::editing::{EditMode, Selection};
use knloc::intervention::{DISTRIBUTION_HEADER, HEATMAP_HEADER, RESULTS_HEADER};
use knloc::pipeline::edit::{ROW_HEADER, SEQUENTIAL_HEADER, SUMMARY_HEADER};
use knloc::pipeline::{self, InterveneTarget, RunConfig, RunContext, OUTPUT_ROOT_ENV};

fn open(dir: &Path, cfg: &RunConfig) -> RunContext {
    RunContext::open(cfg.clone(), cfg.resolved_output_dir(Some(dir))).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn first_line(p: impl AsRef<Path>) -> String {
    read(p).lines().next().unwrap_or_default().to_string()
}

#[test]
fn empty_fact_file_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_workspace(dir.path(), 0);
    let mut ctx = open(dir.path(), &cfg);
    assert!(ctx.facts.is_empty());
    for s in [
        pipeline::cmd_localize(&ctx).unwrap(),
        pipeline::cmd_intervene(&ctx, InterveneTarget::Both).unwrap(),
        pipeline::cmd_edit(&mut ctx, EditMode::Erase, Selection::NI, false).unwrap(),
    ] {
        assert_eq!(s.exit_code(), 0, "{}: {:?}", s.command, s.failures);
        assert_eq!(s.processed, 0);
    }
    assert_eq!(pipeline::cmd_report(&ctx).unwrap().exit_code(), 0);
}

#[test]
fn localize_writes_one_set_per_query_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_workspace(dir.path(), 5);
    let ctx = open(dir.path(), &cfg);
    let first = pipeline::cmd_localize(&ctx).unwrap();
    assert_eq!((first.processed, first.skipped, first.exit_code()), (15, 0, 0));
    let kn_files = common::files_under(&ctx.out.join("localize/ig"))
        .into_iter()
        .filter(|p| p.to_string_lossy().ends_with(".kn.json"))
        .count();
    assert_eq!(kn_files, 5 * 3);
    let csv = ctx.out.join("localize/ig/R0-0/0.csv");
    assert_eq!(first_line(&csv), "layer,neuron,score");
    assert_eq!(read(&csv).lines().count(), 1 + 2 * 64);

    let again = pipeline::cmd_localize(&ctx).unwrap();
    assert_eq!((again.processed, again.skipped), (0, 15));
}

#[test]
fn consistency_tables_and_u_i_gating() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::toy_workspace(dir.path(), 6);
    let ctx = open(dir.path(), &cfg);
    pipeline::cmd_localize(&ctx).unwrap();
    let s = pipeline::cmd_consistency(&ctx).unwrap();
    assert_eq!(s.processed, 6);
    let c = ctx.out.join("consistency");
    assert_eq!(first_line(c.join("table.csv")), TABLE_HEADER);
    assert_eq!(first_line(c.join("violin.csv")), VIOLIN_HEADER);
    assert_eq!(first_line(c.join("sweep.csv")), SWEEP_HEADER);
    assert_eq!(read(c.join("violin.csv")).lines().count(), 7);
    assert!(!c.join("u_i.csv").exists(), "single method must not emit U_I");

    cfg.methods = vec![Method::Ig, Method::Amig];
    let ctx = open(dir.path(), &cfg);
    pipeline::cmd_localize(&ctx).unwrap();
    pipeline::cmd_consistency(&ctx).unwrap();
    assert!(c.join("u_i.csv").exists());
    let table = read(c.join("table.csv"));
    assert!(table.lines().any(|l| l.starts_with("amig,")));

    let sweep = pipeline::cmd_sweep(&ctx, 0.1, 0.5, 0.1).unwrap();
    assert_eq!(sweep.exit_code(), 0);
    // Two methods, five thresholds each.
    assert_eq!(read(ctx.out.join("sweep/sweep.csv")).lines().count(), 1 + 2 * 5);
}

#[test]
fn corrupt_kn_set_is_a_recorded_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_workspace(dir.path(), 4);
    let ctx = open(dir.path(), &cfg);
    pipeline::cmd_localize(&ctx).unwrap();
    fs::write(ctx.out.join("localize/ig/R1-1/2.kn.json"), "{").unwrap();
    let s = pipeline::cmd_consistency(&ctx).unwrap();
    assert_eq!(s.exit_code(), 1);
    assert_eq!(s.processed, 3);
    let failures = read(ctx.out.join("consistency/failures.json"));
    assert!(failures.contains("R1-1"), "{failures}");
}

#[test]
fn identity_factors_leave_every_probability_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::toy_workspace(dir.path(), 3);
    cfg.suppress_factor = 1.0;
    cfg.enhance_factor = 1.0;
    let ctx = open(dir.path(), &cfg);
    pipeline::cmd_localize(&ctx).unwrap();
    pipeline::cmd_consistency(&ctx).unwrap();
    let s = pipeline::cmd_intervene(&ctx, InterveneTarget::Both).unwrap();
    assert_eq!(s.exit_code(), 0, "{:?}", s.failures);
    let dir = ctx.out.join("intervene");
    for f in ["neurons.csv", "synapses.csv"] {
        let text = read(dir.join(f));
        assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER);
        let mut rows = 0;
        for line in text.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            for v in [cells[6], cells[7]] {
                if !v.is_empty() {
                    assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{f}: {line}");
                }
            }
            rows += 1;
        }
        assert!(rows > 0, "{f} is empty");
    }
    assert_eq!(first_line(dir.join("distribution.csv")), DISTRIBUTION_HEADER);
    assert_eq!(first_line(dir.join("heatmaps/R0-0_0_neurons.csv")), HEATMAP_HEADER);
    assert!(dir.join("heatmaps/R0-0_0_synapses.csv").exists());
    assert!(!dir.join("heatmaps/R1-1_0_neurons.csv").exists());
}

#[test]
fn per_fact_edits_restore_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_workspace(dir.path(), 4);
    let mut ctx = open(dir.path(), &cfg);
    let hash = ctx.model.weights_hash();
    pipeline::cmd_localize(&ctx).unwrap();
    pipeline::cmd_consistency(&ctx).unwrap();
    for (mode, sel) in [
        (EditMode::Erase, Selection::NI),
        (EditMode::Erase, Selection::NU),
        (EditMode::Update, Selection::Cas),
    ] {
        let s = pipeline::cmd_edit(&mut ctx, mode, sel, false).unwrap();
        assert_eq!(s.exit_code(), 0, "{:?}", s.failures);
        assert_eq!(ctx.model.weights_hash(), hash);
        let tag = format!("{}_{}", mode.as_str(), sel.as_str());
        let rows = read(ctx.out.join(format!("edit/{tag}.csv")));
        assert_eq!(rows.lines().next().unwrap(), ROW_HEADER);
        assert_eq!(rows.lines().count() - 1 + s.skipped, 4);
        let summary = read(ctx.out.join(format!("edit/summary_{tag}.csv")));
        assert_eq!(summary.lines().next().unwrap(), SUMMARY_HEADER);
        assert!(summary.lines().any(|l| l.starts_with("all,")));
    }
    pipeline::cmd_report(&ctx).unwrap();
    let report = read(ctx.out.join("report/report.md"));
    assert!(report.contains("## edit/summary_erase_n_i.csv"));
    assert!(report.contains("- edit: 0"));
}

#[test]
fn sequential_edits_emit_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::toy_workspace(dir.path(), 6);
    cfg.sequential_facts = 5;
    cfg.sequential_runs = 2;
    let mut ctx = open(dir.path(), &cfg);
    let hash = ctx.model.weights_hash();
    pipeline::cmd_localize(&ctx).unwrap();
    let s = pipeline::cmd_edit(&mut ctx, EditMode::Erase, Selection::NU, true).unwrap();
    assert_eq!(s.exit_code(), 0, "{:?}", s.failures);
    assert_eq!(ctx.model.weights_hash(), hash);
    let rows = read(ctx.out.join("edit/sequential_erase_n_u.csv"));
    assert_eq!(rows.lines().next().unwrap(), SEQUENTIAL_HEADER);
    assert_eq!(rows.lines().count() - 1, 10);
    let summary = read(ctx.out.join("edit/sequential_summary_erase_n_u.csv"));
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",2")), "{summary}");
}

#[test]
fn manifests_record_inputs_and_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_workspace(dir.path(), 2);
    let ctx = open(dir.path(), &cfg);
    pipeline::cmd_sweep(&ctx, 0.1, 0.3, 0.1).unwrap_err();
    pipeline::cmd_localize(&ctx).unwrap();
    pipeline::cmd_sweep(&ctx, 0.1, 0.3, 0.1).unwrap();
    let m: serde_json::Value = serde_json::from_str(&read(ctx.out.join("manifests/sweep.json"))).unwrap();
    assert_eq!(m["command"], "sweep");
    assert_eq!(m["args"]["step"], "0.1");
    for k in ["checkpoint/tensors.bin", "checkpoint/manifest.json", "facts"] {
        assert_eq!(m["input_hashes"][k].as_str().map(str::len), Some(64), "{k}");
    }
}

#[test]
fn cli_runs_from_config_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_workspace(dir.path(), 3);
    let config_path = dir.path().join("run.toml");
    fs::write(&config_path, cfg.to_toml()).unwrap();
    let root = dir.path().join("out");
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_knloc"))
            .arg("--config")
            .arg(&config_path)
            .args(args)
            .env(OUTPUT_ROOT_ENV, &root)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    };
    let out = run(&["--set", "output_dir=cli", "--set", "steps=4", "localize"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["processed"], 9);
    let manifest = read(root.join("cli/manifests/localize.json"));
    assert!(manifest.contains("\"steps\": 4"), "{manifest}");

    fs::write(root.join("cli/localize/ig/R0-0/1.kn.json"), "not json").unwrap();
    let out = run(&["--set", "output_dir=cli", "consistency"]);
    assert_eq!(out.status.code(), Some(1));

    fs::remove_file(root.join("cli/localize/ig/R0-0/1.kn.json")).unwrap();
    let out = run(&["--set", "output_dir=cli", "--set", "steps=4", "localize"]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((summary["processed"].as_u64(), summary["skipped"].as_u64()), (Some(1), Some(8)));

    let out = run(&["--set", "no_such_key=1", "report"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["--set", "output_dir=cli", "edit", "--mode", "update", "--selection", "cas"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("cli/edit/update_cas.csv").exists());
}
