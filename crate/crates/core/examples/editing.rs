// SPDX-License-Identifier: MIT OR Apache-2.0

//! Erasing and updating a fact through its knowledge neurons, scoring the
//! edit, and restoring the checkpoint. Also picks edit targets by CAS.

use std::collections::BTreeSet;

use knloc::attribution::{ig_attribution, select_kns, DEFAULT_SELECTION_FRACTION};
use knloc::dataset::{expand_neighbors, Fact};
use knloc::editing::{apply_edit, cas_scores, restore, select_cas_kns, union_of, EditPlan, Selection};
use knloc::evaluation::{edit_metrics, EditProbe};
use knloc::model::checkpoint::toy_model;
use knloc::model::OverrideSpec;
use knloc::NeuronId;

fn main() -> knloc::Result<()> {
    let mut model = toy_model(42);
    let pre = model.clone();
    let fact = Fact {
        fact_id: "job-0".into(),
        relation: "job".into(),
        subject: "Ada".into(),
        object: "tailor".into(),
        templates: vec!["[X] works as a".into(), "[X] is employed as a".into(), "The job of [X] is".into()],
    };
    let queries = expand_neighbors(&fact, &model)?;
    let sets: Vec<BTreeSet<NeuronId>> = queries
        .iter()
        .map(|q| {
            let map = ig_attribution(&model, &q.key(), &q.token_ids, q.answer_token, 20)?;
            Ok(select_kns(&map, DEFAULT_SELECTION_FRACTION)?.neurons)
        })
        .collect::<knloc::Result<_>>()?;

    let neighbors: Vec<Vec<u32>> = queries.iter().map(|q| q.token_ids.clone()).collect();
    let unrelated: Vec<Vec<u32>> = ["Oslo is a", "the other theater"]
        .iter()
        .map(|t| model.tokenize(t))
        .collect::<knloc::Result<_>>()?;
    let ppl_texts = vec![model.tokenize("the pilot flew over the lake at dawn.")?];
    let answer = queries[0].answer_token;
    let new_object = model.tokenize(" pilot")?[0];

    let snapshots: Vec<Vec<Vec<f64>>> = neighbors
        .iter()
        .map(|q| {
            let a = model.final_activations(q, &OverrideSpec::none())?;
            Ok(a.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect())
        })
        .collect::<knloc::Result<_>>()?;
    let (cas_set, _) = select_cas_kns(&cas_scores(&snapshots, 0.7, 0.3)?, 0.3)?;

    let plans = [
        EditPlan::erase(&fact.fact_id, sets[0].clone(), Selection::NI, answer),
        EditPlan::erase(&fact.fact_id, union_of(&sets), Selection::NU, answer),
        EditPlan::update(&fact.fact_id, cas_set, Selection::Cas, answer, new_object),
    ];
    for plan in plans {
        let (mode, selection, n) = (plan.mode, plan.selection, plan.neuron_set.len());
        let target = plan.new_object_token.unwrap_or(answer);
        let mut record = apply_edit(&mut model, plan)?;
        let probe = EditProbe {
            neighbors: &neighbors,
            edited: 0,
            unrelated: &unrelated,
            ppl_texts: &ppl_texts,
            mode,
            target,
        };
        let e = edit_metrics(&pre, &model, &probe)?;
        println!(
            "{:<6} {:<4} n={n:<4} rel {:.2} gen {:.2} loc {:.2} avg {:.2} dPPL {:+.4}",
            mode.as_str(),
            selection.as_str(),
            e.rel,
            e.gen,
            e.loc,
            e.avg,
            e.delta_ppl
        );
        restore(&mut model, &mut record)?;
        assert_eq!(model.weights_hash(), pre.weights_hash());
    }
    println!("checkpoint restored bit-exact");
    Ok(())
}
