// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;

use super::{read_text, to_json, write_file, CommandSummary, Failure, RunContext};
use crate::attribution::Method;
use crate::consistency::{
    aggregate, reports_csv, sweep_csv, threshold_sweep, u_i_csv, violin_csv, FactConsistency, ThresholdKind,
    SWEEP_HI, SWEEP_LO, SWEEP_STEP,
};
use crate::error::{KnError, Result};

/// Per-method fact scores restricted to facts every method covers.
fn scored_facts(ctx: &RunContext, summary: &mut CommandSummary) -> Result<BTreeMap<Method, Vec<FactConsistency>>> {
    let mut per_method = BTreeMap::new();
    for &m in &ctx.cfg.methods {
        let (facts, failures) = ctx.fact_consistency(m)?;
        if facts.is_empty() && !ctx.facts.is_empty() {
            return Err(KnError::MissingFile(ctx.out.join("localize").join(m.as_str())));
        }
        summary.failures.extend(failures);
        per_method.insert(m, facts);
    }
    let common: BTreeSet<String> = per_method
        .values()
        .map(|fs| fs.iter().map(|f| f.fact_id.clone()).collect::<BTreeSet<_>>())
        .reduce(|a, b| a.intersection(&b).cloned().collect())
        .unwrap_or_default();
    for facts in per_method.values_mut() {
        facts.retain(|f| common.contains(&f.fact_id));
    }
    summary.processed = common.len();
    Ok(per_method)
}

fn sweep_curves(per_method: &BTreeMap<Method, Vec<FactConsistency>>, lo: f64, hi: f64, step: f64) -> BTreeMap<Method, Vec<(f64, f64)>> {
    per_method
        .iter()
        .filter_map(|(&m, facts)| {
            let v: Vec<f64> = facts.iter().filter_map(FactConsistency::cs).collect();
            threshold_sweep(&v, lo, hi, step).ok().map(|c| (m, c))
        })
        .collect()
}

/// Consistency tables under both threshold kinds, per-fact listings and the
/// default threshold sweep.
pub fn cmd_consistency(ctx: &RunContext) -> Result<CommandSummary> {
    ctx.write_manifest("consistency", BTreeMap::new())?;
    let mut summary = CommandSummary::new("consistency");
    let per_method = scored_facts(ctx, &mut summary)?;
    let dir = ctx.out.join("consistency");
    let mut reports = Vec::new();
    for kind in [ThresholdKind::Static, ThresholdKind::Otsu] {
        let mut copy = per_method.clone();
        match aggregate(&mut copy, kind, ctx.cfg.static_threshold) {
            Ok(r) => reports.extend(r),
            Err(e) => summary.failures.push(Failure {
                key: format!("threshold/{}", kind.as_str()),
                error: e.to_string(),
            }),
        }
        if kind == ctx.cfg.threshold_kind {
            for (m, facts) in &copy {
                write_file(&dir.join(format!("facts_{m}.json")), to_json(facts))?;
            }
            write_file(&dir.join("violin.csv"), violin_csv(&copy))?;
        }
    }
    write_file(&dir.join("table.csv"), reports_csv(&reports))?;
    summary.outputs.extend(["consistency/table.csv".into(), "consistency/violin.csv".into()]);
    let u_path = dir.join("u_i.csv");
    match u_i_csv(&reports) {
        Some(csv) => {
            write_file(&u_path, csv)?;
            summary.outputs.push("consistency/u_i.csv".into());
        }
        None if u_path.exists() => fs::remove_file(&u_path).map_err(|e| KnError::io(&u_path, e))?,
        None => {}
    }
    write_file(&dir.join("sweep.csv"), sweep_csv(&sweep_curves(&per_method, SWEEP_LO, SWEEP_HI, SWEEP_STEP)))?;
    summary.outputs.push("consistency/sweep.csv".into());
    ctx.finish(&summary)?;
    Ok(summary)
}

/// Fraction of facts whose relaxed score falls at or below each threshold.
pub fn cmd_sweep(ctx: &RunContext, lo: f64, hi: f64, step: f64) -> Result<CommandSummary> {
    if !(lo < hi && step > 0.0) {
        return Err(KnError::InvalidInput(format!("bad sweep range [{lo}, {hi}] step {step}")));
    }
    let args = [("lo", lo), ("hi", hi), ("step", step)]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    ctx.write_manifest("sweep", args)?;
    let mut summary = CommandSummary::new("sweep");
    let per_method = scored_facts(ctx, &mut summary)?;
    write_file(&ctx.out.join("sweep").join("sweep.csv"), sweep_csv(&sweep_curves(&per_method, lo, hi, step)))?;
    summary.outputs.push("sweep/sweep.csv".into());
    ctx.finish(&summary)?;
    Ok(summary)
}

fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
        }
    }
    out
}

/// Collects the summary tables written by other commands into one Markdown file.
pub fn cmd_report(ctx: &RunContext) -> Result<CommandSummary> {
    ctx.write_manifest("report", BTreeMap::new())?;
    let mut summary = CommandSummary::new("report");
    let mut md = String::from("# Run report\n\n");
    let _ = writeln!(
        md,
        "- facts: {}\n- facts dropped at load: {}\n- templates dropped at load: {}\n",
        ctx.facts.len(),
        ctx.load_report.facts_dropped,
        ctx.load_report.templates_dropped
    );
    let mut tables: Vec<String> = ["consistency/table.csv", "consistency/u_i.csv", "intervene/summary.csv"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let edit_dir = ctx.out.join("edit");
    if edit_dir.exists() {
        let mut names: Vec<String> = fs::read_dir(&edit_dir)
            .map_err(|e| KnError::io(&edit_dir, e))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| (n.starts_with("summary_") || n.starts_with("sequential_summary_")) && n.ends_with(".csv"))
            .collect();
        names.sort();
        tables.extend(names.into_iter().map(|n| format!("edit/{n}")));
    }
    for rel in tables {
        let p = ctx.out.join(&rel);
        if !p.exists() {
            continue;
        }
        let _ = writeln!(md, "## {rel}\n\n{}", csv_to_markdown(&read_text(&p)?));
        summary.processed += 1;
    }
    md.push_str("## Failures\n\n");
    for cmd in ["localize", "consistency", "edit", "intervene", "sweep"] {
        let p = ctx.out.join(cmd).join("failures.json");
        if let Ok(text) = read_text(&p) {
            let failures: Vec<Failure> =
                serde_json::from_str(&text).map_err(|e| KnError::parse(p.display().to_string(), e))?;
            let _ = writeln!(md, "- {cmd}: {}", failures.len());
        }
    }
    write_file(&ctx.out.join("report").join("report.md"), md)?;
    summary.outputs.push("report/report.md".into());
    ctx.finish(&summary)?;
    Ok(summary)
}
