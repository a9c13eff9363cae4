// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::info;

use super::{mean, write_file, CommandSummary, RunContext};
use crate::consistency::Class;
use crate::dataset::{answer_token, expand_neighbors, sample_unrelated, Fact};
use crate::editing::{
    apply_edit, cas_scores, restore_all, select_cas_kns, sequential_edit, union_of, EditMode, EditPlan, Selection,
};
use crate::error::{KnError, Result};
use crate::evaluation::{
    edit_metrics_with_baseline, perplexity, predict, sample_indices, EditEvaluation, EditProbe, MetricSummary,
    PreEditBaseline,
};
use crate::model::NeuronId;

pub const ROW_HEADER: &str = "fact_id,relation,class,selection,mode,n_neurons,multitoken,rel,gen,loc,avg,delta_ppl";
pub const SUMMARY_HEADER: &str = "class,selection,mode,n,rel,gen,loc,avg,delta_ppl";
pub const SEQUENTIAL_HEADER: &str = "run,step,fact_id,rel,gen,loc,avg,delta_ppl";
pub const SEQUENTIAL_SUMMARY_HEADER: &str = "metric,mean,std,runs";

/// Everything needed to edit one fact and score the edit.
struct Prepared {
    plan: EditPlan,
    neighbors: Vec<Vec<u32>>,
    unrelated: Vec<Vec<u32>>,
    baseline: PreEditBaseline,
    target: u32,
    multitoken: bool,
}

impl Prepared {
    fn probe<'a>(&'a self, ppl_texts: &'a [Vec<u32>]) -> EditProbe<'a> {
        EditProbe {
            neighbors: &self.neighbors,
            edited: 0,
            unrelated: &self.unrelated,
            ppl_texts,
            mode: self.plan.mode,
            target: self.target,
        }
    }
}

/// First token of another fact's object under the same relation (any
/// relation when none differs), chosen by a seeded rotation.
fn new_object_token(ctx: &RunContext, fact: &Fact, original: u32, salt: u64) -> Result<u32> {
    let mut candidates: Vec<u32> = Vec::new();
    for same_relation in [true, false] {
        let mut toks = BTreeSet::new();
        for f in ctx.facts.iter().filter(|f| (f.relation == fact.relation) == same_relation) {
            let (t, _) = answer_token(&ctx.model, &f.object)?;
            if t != original {
                toks.insert(t);
            }
        }
        candidates.extend(toks);
        if !candidates.is_empty() {
            break;
        }
    }
    if candidates.is_empty() {
        return Err(KnError::InvalidInput(format!("no replacement object for fact {}", fact.fact_id)));
    }
    let pick = ctx.cfg.seed.wrapping_add(salt) % candidates.len() as u64;
    Ok(candidates[pick as usize])
}

fn neuron_set(ctx: &RunContext, fact: &Fact, queries: &[Vec<u32>], selection: Selection) -> Result<BTreeSet<NeuronId>> {
    match selection {
        Selection::NI | Selection::NU => {
            let sets = ctx.load_kn_sets(ctx.cfg.primary_method(), fact)?;
            Ok(match selection {
                Selection::NI => sets[0].neurons.clone(),
                _ => union_of(sets.iter().map(|s| &s.neurons)),
            })
        }
        Selection::Cas => {
            let snapshots = queries
                .iter()
                .map(|q| {
                    let a = ctx.model.final_activations(q, &Default::default())?;
                    Ok(a.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect())
                })
                .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
            let map = cas_scores(&snapshots, ctx.cfg.beta1, ctx.cfg.beta2)?;
            Ok(select_cas_kns(&map, ctx.cfg.cas_ratio)?.0)
        }
    }
}

fn prepare(
    ctx: &RunContext,
    index: usize,
    fact: &Fact,
    mode: EditMode,
    selection: Selection,
    ppl_baseline: &[f64],
) -> Result<Option<Prepared>> {
    let queries = expand_neighbors(fact, &ctx.model)?;
    let neighbors: Vec<Vec<u32>> = queries.iter().map(|q| q.token_ids.clone()).collect();
    let neurons = neuron_set(ctx, fact, &neighbors, selection)?;
    if neurons.is_empty() {
        return Ok(None);
    }
    let object = queries[0].answer_token;
    let salt = index as u64;
    let mut plan = match mode {
        EditMode::Erase => EditPlan::erase(&fact.fact_id, neurons, selection, object),
        EditMode::Update => {
            let new = new_object_token(ctx, fact, object, salt)?;
            EditPlan::update(&fact.fact_id, neurons, selection, object, new)
        }
    };
    plan.lambda1 = ctx.cfg.lambda1;
    plan.lambda2 = ctx.cfg.lambda2;
    let pool = ctx.facts.iter().filter(|f| f.relation != fact.relation).count();
    let n = ctx.cfg.unrelated_count.min(pool);
    if n == 0 {
        return Err(KnError::InvalidInput(format!("no facts outside relation {}", fact.relation)));
    }
    let unrelated: Vec<Vec<u32>> = sample_unrelated(&ctx.facts, fact, n, ctx.cfg.seed.wrapping_add(salt), &ctx.model)?
        .into_iter()
        .map(|q| q.token_ids)
        .collect();
    let baseline = PreEditBaseline {
        unrelated_predictions: unrelated.iter().map(|q| predict(&ctx.model, q)).collect::<Result<_>>()?,
        ppl: ppl_baseline.to_vec(),
    };
    let target = match mode {
        EditMode::Erase => object,
        EditMode::Update => plan.new_object_token.expect("update plan"),
    };
    Ok(Some(Prepared {
        plan,
        neighbors,
        unrelated,
        baseline,
        target,
        multitoken: queries[0].answer_is_multitoken,
    }))
}

fn sampled_ppl_texts(ctx: &RunContext) -> Result<Vec<Vec<u32>>> {
    let all = ctx.eval_tokens()?;
    if all.is_empty() {
        return Ok(all);
    }
    let idx = sample_indices(all.len(), ctx.cfg.ppl_samples.min(all.len()), ctx.cfg.seed)?;
    Ok(idx.into_iter().map(|i| all[i].clone()).collect())
}

fn verify(ctx: &RunContext, expected: &str, after: &str) -> Result<()> {
    if ctx.model.weights_hash() != expected {
        return Err(KnError::Edit(format!("checkpoint hash changed after {after}; run aborted")));
    }
    Ok(())
}

/// Edits each fact, scores the edit and restores the weights, verifying the
/// checkpoint hash after every fact. With `sequential`, edits of sampled facts
/// accumulate within each run instead.
pub fn cmd_edit(ctx: &mut RunContext, mode: EditMode, selection: Selection, sequential: bool) -> Result<CommandSummary> {
    let args: BTreeMap<String, String> = [
        ("mode", mode.as_str().to_string()),
        ("selection", selection.as_str().to_string()),
        ("sequential", sequential.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    ctx.write_manifest("edit", args)?;
    let original = ctx.model.weights_hash();
    let ppl_texts = sampled_ppl_texts(ctx)?;
    let ppl_baseline: Vec<f64> = ppl_texts.iter().map(|t| perplexity(&ctx.model, t)).collect::<Result<_>>()?;
    let classes = ctx.classes()?;
    let mut summary = CommandSummary::new("edit");
    let tag = format!("{}_{}", mode.as_str(), selection.as_str());
    if sequential {
        run_sequential(ctx, mode, selection, &ppl_texts, &ppl_baseline, &original, &tag, &mut summary)?;
    } else {
        run_per_fact(ctx, mode, selection, &ppl_texts, &ppl_baseline, &classes, &original, &tag, &mut summary)?;
    }
    ctx.finish(&summary)?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn run_per_fact(
    ctx: &mut RunContext,
    mode: EditMode,
    selection: Selection,
    ppl_texts: &[Vec<u32>],
    ppl_baseline: &[f64],
    classes: &BTreeMap<String, Class>,
    original: &str,
    tag: &str,
    summary: &mut CommandSummary,
) -> Result<()> {
    let mut rows = format!("{ROW_HEADER}\n");
    let mut by_class: BTreeMap<&'static str, Vec<EditEvaluation>> = BTreeMap::new();
    for index in 0..ctx.facts.len() {
        let fact = ctx.facts[index].clone();
        let prepared = match prepare(ctx, index, &fact, mode, selection, ppl_baseline) {
            Ok(Some(p)) => p,
            Ok(None) => {
                summary.skipped += 1;
                continue;
            }
            Err(e) => {
                summary.fail(&fact.fact_id, &e);
                continue;
            }
        };
        let mut record = match apply_edit(&mut ctx.model, prepared.plan.clone()) {
            Ok(r) => r,
            Err(e) => {
                summary.fail(&fact.fact_id, &e);
                continue;
            }
        };
        let eval = edit_metrics_with_baseline(&prepared.baseline, &ctx.model, &prepared.probe(ppl_texts));
        record.restore(&mut ctx.model)?;
        verify(ctx, original, &format!("fact {}", fact.fact_id))?;
        let e = match eval {
            Ok(e) => e,
            Err(e) => {
                summary.fail(&fact.fact_id, &e);
                continue;
            }
        };
        let class = classes.get(&fact.fact_id).copied().unwrap_or(Class::Undefined).as_str();
        let _ = writeln!(
            rows,
            "{},{},{class},{},{},{},{},{},{},{},{},{}",
            fact.fact_id,
            fact.relation,
            selection.as_str(),
            mode.as_str(),
            prepared.plan.neuron_set.len(),
            u8::from(prepared.multitoken),
            e.rel,
            e.gen,
            e.loc,
            e.avg,
            e.delta_ppl
        );
        by_class.entry(class).or_default().push(e);
        by_class.entry("all").or_default().push(e);
        summary.processed += 1;
    }
    let mut table = format!("{SUMMARY_HEADER}\n");
    for (class, evals) in &by_class {
        let col = |f: fn(&EditEvaluation) -> f64| mean(&evals.iter().map(f).collect::<Vec<_>>());
        let _ = writeln!(
            table,
            "{class},{},{},{},{},{},{},{},{}",
            selection.as_str(),
            mode.as_str(),
            evals.len(),
            col(|e| e.rel),
            col(|e| e.gen),
            col(|e| e.loc),
            col(|e| e.avg),
            col(|e| e.delta_ppl)
        );
    }
    let dir = ctx.out.join("edit");
    write_file(&dir.join(format!("{tag}.csv")), rows)?;
    write_file(&dir.join(format!("summary_{tag}.csv")), table)?;
    summary.outputs.extend([format!("edit/{tag}.csv"), format!("edit/summary_{tag}.csv")]);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sequential(
    ctx: &mut RunContext,
    mode: EditMode,
    selection: Selection,
    ppl_texts: &[Vec<u32>],
    ppl_baseline: &[f64],
    original: &str,
    tag: &str,
    summary: &mut CommandSummary,
) -> Result<()> {
    let mut rows = format!("{SEQUENTIAL_HEADER}\n");
    let mut run_means = Vec::new();
    let n = ctx.cfg.sequential_facts.min(ctx.facts.len());
    for run in 0..ctx.cfg.sequential_runs {
        let picks = sample_indices(ctx.facts.len(), n, ctx.cfg.seed.wrapping_add(run as u64))?;
        let mut prepared = Vec::new();
        for index in picks {
            let fact = ctx.facts[index].clone();
            match prepare(ctx, index, &fact, mode, selection, ppl_baseline) {
                Ok(Some(p)) => prepared.push(p),
                Ok(None) => summary.skipped += 1,
                Err(e) => summary.fail(format!("run{run}/{}", fact.fact_id), &e),
            }
        }
        if prepared.is_empty() {
            continue;
        }
        info!("sequential run {run}: {} edits", prepared.len());
        let plans: Vec<EditPlan> = prepared.iter().map(|p| p.plan.clone()).collect();
        let outcome = sequential_edit(&mut ctx.model, &plans, |model, i, _| {
            edit_metrics_with_baseline(&prepared[i].baseline, model, &prepared[i].probe(ppl_texts))
        });
        let mut outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                verify(ctx, original, &format!("aborted sequential run {run}"))?;
                summary.fail(format!("run{run}"), &e);
                continue;
            }
        };
        restore_all(&mut ctx.model, &mut outcome.records)?;
        verify(ctx, original, &format!("sequential run {run}"))?;
        for (step, (e, p)) in outcome.evaluations.iter().zip(&prepared).enumerate() {
            let _ = writeln!(
                rows,
                "{run},{step},{},{},{},{},{},{}",
                p.plan.fact_id, e.rel, e.gen, e.loc, e.avg, e.delta_ppl
            );
        }
        let s = MetricSummary::from_evaluations(&outcome.evaluations).expect("non-empty run");
        run_means.push(EditEvaluation {
            rel: s.mean[0],
            gen: s.mean[1],
            loc: s.mean[2],
            avg: s.mean[3],
            delta_ppl: s.mean[4],
            mode,
        });
        summary.processed += outcome.evaluations.len();
    }
    let mut table = format!("{SEQUENTIAL_SUMMARY_HEADER}\n");
    if let Some(s) = MetricSummary::from_evaluations(&run_means) {
        for (j, name) in MetricSummary::COLUMNS.iter().enumerate() {
            let _ = writeln!(table, "{name},{},{},{}", s.mean[j], s.std[j], s.runs);
        }
    }
    let dir = ctx.out.join("edit");
    write_file(&dir.join(format!("sequential_{tag}.csv")), rows)?;
    write_file(&dir.join(format!("sequential_summary_{tag}.csv")), table)?;
    summary
        .outputs
        .extend([format!("edit/sequential_{tag}.csv"), format!("edit/sequential_summary_{tag}.csv")]);
    Ok(())
}
