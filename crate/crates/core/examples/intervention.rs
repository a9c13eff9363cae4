// SPDX-License-Identifier: MIT OR Apache-2.0

//! Suppressing and enhancing the five neuron sets of a query, then locating
//! and suppressing its knowledge synapses.

use std::collections::BTreeSet;

use knloc::attribution::{ig_attribution, select_kns, DEFAULT_SELECTION_FRACTION};
use knloc::dataset::{expand_neighbors, Fact};
use knloc::intervention::{
    build_neuron_sets, locate_synapses, manipulate_neurons, manipulate_synapses, Factors, Target, WatchSets,
    DEFAULT_ALPHA,
};
use knloc::model::checkpoint::toy_model;
use knloc::model::{InterventionMode, OverrideSpec};
use knloc::NeuronId;

fn main() -> knloc::Result<()> {
    let model = toy_model(42).cast::<f64>();
    let c = model.config.clone();
    let fact = Fact {
        fact_id: "born-0".into(),
        relation: "born".into(),
        subject: "Lena".into(),
        object: "toledo".into(),
        templates: vec!["[X] was born in".into(), "[X] comes from".into(), "The birthplace of [X] is".into()],
    };
    let queries = expand_neighbors(&fact, &model)?;
    let sets: Vec<BTreeSet<NeuronId>> = queries
        .iter()
        .map(|q| {
            let map = ig_attribution(&model, &q.key(), &q.token_ids, q.answer_token, 20)?;
            Ok(select_kns(&map, DEFAULT_SELECTION_FRACTION)?.neurons)
        })
        .collect::<knloc::Result<_>>()?;
    let bundle = build_neuron_sets(&sets, 0, c.n_layers, c.d_ff, 7)?;
    let q = &queries[0];
    println!("query {:?}", q.text);
    for mode in [InterventionMode::Suppress, InterventionMode::Enhance] {
        for target in Target::NEURON_SETS {
            let set = bundle.get(target).expect("neuron set");
            if set.is_empty() {
                println!("  {:<8} {:<12} (empty)", mode.as_str(), target.as_str());
                continue;
            }
            let r = manipulate_neurons(&model, &q.token_ids, q.answer_token, target, set, mode, Factors::default())?;
            println!("  {:<8} {:<12} n={:<3} dProb {:+.4}", mode.as_str(), target.as_str(), set.len(), r.delta_prob);
        }
    }

    let trace = model.forward(&q.token_ids, &OverrideSpec::none())?;
    let ks = locate_synapses(&trace, DEFAULT_ALPHA)?;
    println!("{} knowledge synapses (tau {:.4})", ks.synapses.len(), ks.tau);
    let watch = WatchSets::from_bundle(&bundle, c.n_layers, c.d_ff);
    for mode in [InterventionMode::Suppress, InterventionMode::Enhance] {
        for r in manipulate_synapses(&model, &q.token_ids, q.answer_token, &ks, mode, &watch, Factors::default())? {
            println!(
                "  {:<8} watch {:<12} dValue {:+.4} dProb {:+.4}",
                mode.as_str(),
                r.target.as_str(),
                r.delta_value.unwrap_or(f64::NAN),
                r.delta_prob
            );
        }
    }
    Ok(())
}
