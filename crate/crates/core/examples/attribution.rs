// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution maps under IG, SIG and AMIG for one query, and the knowledge
//! neurons each selects.

use knloc::attribution::{attribute, select_kns, Method, DEFAULT_SELECTION_FRACTION};
use knloc::model::checkpoint::toy_model;
use knloc::model::GradientSession;

fn main() -> knloc::Result<()> {
    let model = toy_model(42).cast::<f64>();
    let tokens = model.tokenize("The job of Ada is")?;
    let answer = model.tokenize(" t")?[0];

    let session = GradientSession::new(&model, &tokens, answer)?;
    let p = session.probability(session.natural_activations())?;
    let zeros: Vec<Vec<f64>> = session.natural_activations().iter().map(|r| vec![0.0; r.len()]).collect();
    let p0 = session.probability(&zeros)?;
    println!("P(answer) = {p:.6}, with all activations zeroed {p0:.6}");

    for method in Method::ALL {
        let map = attribute(&model, method, "ada/0", &tokens, answer, 50)?;
        let kns = select_kns(&map, DEFAULT_SELECTION_FRACTION)?;
        let mut top: Vec<_> = kns.neurons.iter().map(|n| (*n, map.scores[n.layer][n.position])).collect();
        top.sort_by(|a, b| b.1.total_cmp(&a.1));
        println!("{method}: total {:+.3e}, {} knowledge neurons", map.total(), kns.len());
        for (n, s) in top.iter().take(5) {
            println!("  {n} {s:+.4e}");
        }
    }
    Ok(())
}
