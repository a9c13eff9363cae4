// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use super::{mean, safe_name, write_file, CommandSummary, RunContext};
use crate::consistency::Class;
use crate::dataset::{expand_neighbors, QueryInstance};
use crate::error::{KnError, Result};
use crate::intervention::{
    build_neuron_sets, distribution_rows, heatmap_csv, locate_synapses, manipulate_neurons, manipulate_synapses,
    results_csv_rows, Factors, InterventionResult, Target, WatchSets, DISTRIBUTION_HEADER, RESULTS_HEADER,
};
use crate::model::{InterventionMode, OverrideSpec};

/// Which interventions `cmd_intervene` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterveneTarget {
    Neurons,
    Synapses,
    Both,
}

impl InterveneTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Neurons => "neurons",
            Self::Synapses => "synapses",
            Self::Both => "both",
        }
    }

    fn neurons(self) -> bool {
        self != Self::Synapses
    }

    fn synapses(self) -> bool {
        self != Self::Neurons
    }
}

pub const SUMMARY_HEADER: &str = "target,mode,n,mean_delta_prob,mean_delta_value";

const MODES: [InterventionMode; 2] = [InterventionMode::Suppress, InterventionMode::Enhance];

struct Job<'a> {
    fact_index: usize,
    class: Class,
    query: QueryInstance,
    neighbor_sets: &'a [std::collections::BTreeSet<crate::model::NeuronId>],
}

#[derive(Default)]
struct JobOutput {
    neuron_rows: String,
    synapse_rows: String,
    distribution: String,
    heatmaps: Vec<(String, String)>,
    results: Vec<InterventionResult>,
}

fn run_job(ctx: &RunContext, job: &Job<'_>, what: InterveneTarget, factors: Factors) -> Result<JobOutput> {
    let c = &ctx.model.config;
    let q = &job.query;
    let seed = ctx.cfg.seed.wrapping_add((job.fact_index as u64) * 1009 + q.query_index as u64);
    let bundle = build_neuron_sets(job.neighbor_sets, q.query_index, c.n_layers, c.d_ff, seed)?;
    let mut out = JobOutput::default();
    let heat = job.fact_index < ctx.cfg.heatmap_facts && q.query_index == 0;
    let stem = format!("{}_{}", safe_name(&q.fact_id), q.query_index);
    if what.neurons() {
        for mode in MODES {
            for target in Target::NEURON_SETS {
                let set = bundle.get(target).expect("neuron target");
                if set.is_empty() {
                    let _ = writeln!(out.neuron_rows, "{},{},{},{},,,,", q.fact_id, q.query_index, target.as_str(), mode.as_str());
                    continue;
                }
                let r = manipulate_neurons(&ctx.model, &q.token_ids, q.answer_token, target, set, mode, factors)?;
                results_csv_rows(&q.fact_id, q.query_index, std::slice::from_ref(&r), &mut out.neuron_rows);
                out.results.push(r);
            }
        }
        if heat && !bundle.self_set.is_empty() {
            let spec = OverrideSpec::neurons(&bundle.self_set, InterventionMode::Suppress)
                .with_factors(factors.suppress, factors.enhance);
            let before = ctx.model.final_activations(&q.token_ids, &OverrideSpec::none())?;
            let after = ctx.model.final_activations(&q.token_ids, &spec)?;
            out.heatmaps.push((format!("{stem}_neurons.csv"), heatmap_csv(&before, &after, &bundle.self_set)));
        }
    }
    if what.synapses() {
        let trace = ctx.model.forward(&q.token_ids, &OverrideSpec::none())?;
        let ks = locate_synapses(&trace, ctx.cfg.alpha)?;
        if ks.synapses.is_empty() {
            return Err(KnError::Degenerate("no knowledge synapse exceeds the threshold".into()));
        }
        let watch = WatchSets::from_bundle(&bundle, c.n_layers, c.d_ff);
        for mode in MODES {
            let rs = manipulate_synapses(&ctx.model, &q.token_ids, q.answer_token, &ks, mode, &watch, factors)?;
            results_csv_rows(&q.fact_id, q.query_index, &rs, &mut out.synapse_rows);
            out.results.extend(rs);
        }
        let spec = OverrideSpec::synapses(&ks.synapses, InterventionMode::Suppress)
            .with_factors(factors.suppress, factors.enhance);
        let before = trace.final_activations();
        let after = ctx.model.final_activations(&q.token_ids, &spec)?;
        distribution_rows(&q.key(), job.class.as_str(), &before, &after, &watch, &mut out.distribution);
        if heat {
            out.heatmaps.push((format!("{stem}_synapses.csv"), heatmap_csv(&before, &after, &bundle.self_set)));
        }
    }
    Ok(out)
}

/// Neuron-set and knowledge-synapse interventions for every query, with
/// before/after heatmaps for the first `heatmap_facts` facts.
pub fn cmd_intervene(ctx: &RunContext, what: InterveneTarget) -> Result<CommandSummary> {
    let args = [("target".to_string(), what.as_str().to_string())].into_iter().collect();
    ctx.write_manifest("intervene", args)?;
    let mut summary = CommandSummary::new("intervene");
    let factors = Factors {
        suppress: ctx.cfg.suppress_factor,
        enhance: ctx.cfg.enhance_factor,
    };
    let classes = ctx.classes()?;
    let mut per_fact = Vec::new();
    for (fi, f) in ctx.facts.iter().enumerate() {
        let loaded = expand_neighbors(f, &ctx.model).and_then(|qs| {
            let sets = ctx.load_kn_sets(ctx.cfg.primary_method(), f)?;
            Ok((qs, sets.into_iter().map(|s| s.neurons).collect::<Vec<_>>()))
        });
        match loaded {
            Ok((qs, sets)) => per_fact.push((fi, qs, sets)),
            Err(e) => summary.fail(&f.fact_id, &e),
        }
    }
    let jobs: Vec<Job<'_>> = per_fact
        .iter()
        .flat_map(|(fi, qs, sets)| {
            let class = classes.get(&ctx.facts[*fi].fact_id).copied().unwrap_or(Class::Undefined);
            qs.iter().map(move |q| Job {
                fact_index: *fi,
                class,
                query: q.clone(),
                neighbor_sets: sets,
            })
        })
        .collect();
    let outputs: Vec<Result<JobOutput>> = jobs.par_iter().map(|j| run_job(ctx, j, what, factors)).collect();

    let dir = ctx.out.join("intervene");
    let mut neurons = format!("{RESULTS_HEADER}\n");
    let mut synapses = format!("{RESULTS_HEADER}\n");
    let mut distribution = format!("{DISTRIBUTION_HEADER}\n");
    let mut groups: BTreeMap<(Target, InterventionMode), Vec<&InterventionResult>> = BTreeMap::new();
    let mut ok_outputs = Vec::new();
    for (job, out) in jobs.iter().zip(&outputs) {
        match out {
            Ok(o) => {
                neurons.push_str(&o.neuron_rows);
                synapses.push_str(&o.synapse_rows);
                distribution.push_str(&o.distribution);
                for (name, csv) in &o.heatmaps {
                    write_file(&dir.join("heatmaps").join(name), csv)?;
                }
                ok_outputs.push(o);
                summary.processed += 1;
            }
            Err(e) => summary.fail(job.query.key(), e),
        }
    }
    for o in &ok_outputs {
        for r in &o.results {
            groups.entry((r.target, r.mode)).or_default().push(r);
        }
    }
    let mut table = format!("{SUMMARY_HEADER}\n");
    for ((target, mode), rs) in &groups {
        let dp: Vec<f64> = rs.iter().map(|r| r.delta_prob).collect();
        let dv: Vec<f64> = rs.iter().filter_map(|r| r.delta_value).collect();
        let dv = if dv.is_empty() { String::new() } else { mean(&dv).to_string() };
        let _ = writeln!(table, "{},{},{},{},{dv}", target.as_str(), mode.as_str(), rs.len(), mean(&dp));
    }
    if what.neurons() {
        write_file(&dir.join("neurons.csv"), neurons)?;
        summary.outputs.push("intervene/neurons.csv".into());
    }
    if what.synapses() {
        write_file(&dir.join("synapses.csv"), synapses)?;
        write_file(&dir.join("distribution.csv"), distribution)?;
        summary.outputs.extend(["intervene/synapses.csv".into(), "intervene/distribution.csv".into()]);
    }
    write_file(&dir.join("summary.csv"), table)?;
    summary.outputs.push("intervene/summary.csv".into());
    ctx.finish(&summary)?;
    Ok(summary)
}
