// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neighbor-query knowledge-neuron sets, their consistency scores, and the
//! aggregate statistics (thresholds, class rates, Welch test).

use std::collections::BTreeSet;

use knloc::attribution::{ig_attribution, select_kns, DEFAULT_SELECTION_FRACTION};
use knloc::consistency::{cs_scores, otsu_threshold, threshold_sweep, welch_t_test};
use knloc::dataset::{expand_neighbors, Fact};
use knloc::model::checkpoint::toy_model;
use knloc::NeuronId;

fn main() -> knloc::Result<()> {
    let model = toy_model(42);
    let templates = ["[X] works as a", "[X] is employed as a", "The job of [X] is"];
    let mut values = Vec::new();
    for (i, subject) in ["Ada", "Boris", "Chen", "Dana", "Emil", "Fatma", "Goran", "Hana"].iter().enumerate() {
        let fact = Fact {
            fact_id: format!("job-{i}"),
            relation: "job".into(),
            subject: subject.to_string(),
            object: "tailor".into(),
            templates: templates.iter().map(|t| t.to_string()).collect(),
        };
        let sets: Vec<BTreeSet<NeuronId>> = expand_neighbors(&fact, &model)?
            .iter()
            .map(|q| {
                let map = ig_attribution(&model, &q.key(), &q.token_ids, q.answer_token, 20)?;
                Ok(select_kns(&map, DEFAULT_SELECTION_FRACTION)?.neurons)
            })
            .collect::<knloc::Result<_>>()?;
        let cs = cs_scores(&sets)?;
        println!(
            "{}: sizes {:?}, CS original {:.3}, relaxed {:.3}",
            fact.fact_id,
            sets.iter().map(BTreeSet::len).collect::<Vec<_>>(),
            cs.original,
            cs.relaxed
        );
        values.push(cs.relaxed);
    }

    match otsu_threshold(&values) {
        Ok(t) => {
            let (hi, lo): (Vec<f64>, Vec<f64>) = values.iter().partition(|&&v| v > t);
            println!("Otsu threshold {t:.4}: {} consistent, {} inconsistent", hi.len(), lo.len());
            if let Ok(w) = welch_t_test(&hi, &lo) {
                println!("Welch t = {:.3}, df = {:.2}, p = {:.3e}", w.t, w.df, w.p);
            }
        }
        Err(e) => println!("no Otsu split: {e}"),
    }
    for (t, f) in threshold_sweep(&values, 0.1, 0.5, 0.1)? {
        println!("fraction with CS <= {t:.2}: {f:.3}");
    }
    Ok(())
}
