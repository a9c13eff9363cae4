// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use log::info;
use rayon::prelude::*;

use super::{to_json, write_file, CommandSummary, RunContext};
use crate::attribution::{attribute, select_kns, Method};
use crate::dataset::{expand_neighbors, QueryInstance};
use crate::error::Result;

enum Outcome {
    Done,
    Resumed,
}

fn localize_query(ctx: &RunContext, method: Method, q: &QueryInstance) -> Result<Outcome> {
    let dir = ctx.kn_dir(method, &q.fact_id);
    let kn_path = dir.join(format!("{}.kn.json", q.query_index));
    if kn_path.exists() {
        return Ok(Outcome::Resumed);
    }
    let map = attribute(&ctx.model, method, &q.key(), &q.token_ids, q.answer_token, ctx.cfg.steps)?;
    let kns = select_kns(&map, ctx.cfg.selection_fraction)?;
    write_file(&dir.join(format!("{}.csv", q.query_index)), map.to_csv())?;
    write_file(&kn_path, to_json(&kns))?;
    Ok(Outcome::Done)
}

/// Attribution map and knowledge-neuron set for every query of every fact
/// under each configured method. Completed queries are skipped.
pub fn cmd_localize(ctx: &RunContext) -> Result<CommandSummary> {
    ctx.write_manifest("localize", BTreeMap::new())?;
    let mut summary = CommandSummary::new("localize");
    let mut queries = Vec::new();
    for f in &ctx.facts {
        match expand_neighbors(f, &ctx.model) {
            Ok(qs) => queries.extend(qs),
            Err(e) => summary.fail(&f.fact_id, &e),
        }
    }
    for &method in &ctx.cfg.methods {
        info!("localize: {method} over {} queries", queries.len());
        let results: Vec<Result<Outcome>> = queries.par_iter().map(|q| localize_query(ctx, method, q)).collect();
        for (q, r) in queries.iter().zip(results) {
            match r {
                Ok(Outcome::Done) => summary.processed += 1,
                Ok(Outcome::Resumed) => summary.skipped += 1,
                Err(e) => summary.fail(format!("{method}/{}", q.key()), &e),
            }
        }
        summary.outputs.push(format!("localize/{method}"));
    }
    ctx.finish(&summary)?;
    Ok(summary)
}
