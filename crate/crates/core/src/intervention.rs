// SPDX-License-Identifier: MIT OR Apache-2.0

//! Suppress/enhance interventions on neuron sets and on knowledge synapses
//! (attention columns), with relative-change effect measures.
//!
//! Effects are signed so that an intervention working as intended reports a
//! positive number: relative changes are negated for suppression.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KnError, Result};
use crate::model::{ActivationTrace, InterventionMode, Model, NeuronId, OverrideSpec, Scalar, SynapseId};

pub const DEFAULT_ALPHA: f64 = 0.3;

/// The five neuron sets built around query `i` of a fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronSetBundle {
    pub self_set: BTreeSet<NeuronId>,
    pub union_set: BTreeSet<NeuronId>,
    pub intersection_set: BTreeSet<NeuronId>,
    pub refine_set: BTreeSet<NeuronId>,
    pub unrelated_set: BTreeSet<NeuronId>,
    pub query_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[serde(rename = "self")]
    SelfSet,
    Union,
    Intersection,
    Refine,
    Unrelated,
    Ks,
    NeighborKn,
    NonKn,
}

impl Target {
    pub const NEURON_SETS: [Target; 5] = [
        Target::SelfSet,
        Target::Union,
        Target::Intersection,
        Target::Refine,
        Target::Unrelated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SelfSet => "self",
            Self::Union => "union",
            Self::Intersection => "intersection",
            Self::Refine => "refine",
            Self::Unrelated => "unrelated",
            Self::Ks => "ks",
            Self::NeighborKn => "neighbor_kn",
            Self::NonKn => "non_kn",
        }
    }
}

impl NeuronSetBundle {
    pub fn get(&self, target: Target) -> Option<&BTreeSet<NeuronId>> {
        match target {
            Target::SelfSet => Some(&self.self_set),
            Target::Union => Some(&self.union_set),
            Target::Intersection => Some(&self.intersection_set),
            Target::Refine => Some(&self.refine_set),
            Target::Unrelated => Some(&self.unrelated_set),
            _ => None,
        }
    }
}

/// Builds the five sets for query `i` from the knowledge-neuron sets of all
/// `k` neighbor queries. Unrelated neurons are drawn (seeded, without
/// replacement) from the neurons outside every neighbor set.
pub fn build_neuron_sets(
    neighbor_sets: &[BTreeSet<NeuronId>],
    i: usize,
    n_layers: usize,
    d_ff: usize,
    seed: u64,
) -> Result<NeuronSetBundle> {
    let k = neighbor_sets.len();
    if k < 2 {
        return Err(KnError::InvalidInput(format!("need k >= 2 neighbor sets, got {k}")));
    }
    if i >= k {
        return Err(KnError::OutOfRange(format!("query index {i} of {k}")));
    }
    for n in neighbor_sets.iter().flatten() {
        if n.layer >= n_layers || n.position >= d_ff {
            return Err(KnError::OutOfRange(format!("neuron {n} outside [{n_layers}, {d_ff}]")));
        }
    }
    let mut counts: BTreeMap<NeuronId, usize> = BTreeMap::new();
    for (_, s) in neighbor_sets.iter().enumerate().filter(|(j, _)| *j != i) {
        for &n in s {
            *counts.entry(n).or_default() += 1;
        }
    }
    let union_set: BTreeSet<NeuronId> = counts.keys().copied().collect();
    let intersection_set = counts.iter().filter(|(_, &c)| c == k - 1).map(|(&n, _)| n).collect();
    let refine_set = counts.iter().filter(|(_, &c)| c > 1).map(|(&n, _)| n).collect();
    let self_set = neighbor_sets[i].clone();
    let touched: BTreeSet<NeuronId> = neighbor_sets.iter().flatten().copied().collect();
    let pool: Vec<NeuronId> = (0..n_layers)
        .flat_map(|l| (0..d_ff).map(move |p| NeuronId::new(l, p)))
        .filter(|n| !touched.contains(n))
        .collect();
    if pool.len() < self_set.len() {
        return Err(KnError::InvalidInput(format!(
            "only {} unrelated neurons available, need {}",
            pool.len(),
            self_set.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unrelated_set = rand::seq::index::sample(&mut rng, pool.len(), self_set.len())
        .into_iter()
        .map(|j| pool[j])
        .collect();
    Ok(NeuronSetBundle {
        self_set,
        union_set,
        intersection_set,
        refine_set,
        unrelated_set,
        query_index: i,
        seed,
    })
}

/// Effect of one intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub target: Target,
    pub mode: InterventionMode,
    pub prob_before: f64,
    pub prob_after: f64,
    pub delta_prob: f64,
    /// Relative change of the watched set's mean final-position activation.
    pub delta_value: Option<f64>,
}

/// Suppress/enhance multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub suppress: f64,
    pub enhance: f64,
}

impl Default for Factors {
    fn default() -> Self {
        Self {
            suppress: 0.0,
            enhance: 2.0,
        }
    }
}

impl Factors {
    /// Factors that leave the forward pass unchanged.
    pub fn identity() -> Self {
        Self {
            suppress: 1.0,
            enhance: 1.0,
        }
    }
}

/// `sign * (after - before) / |before|`.
pub fn signed_relative_change(before: f64, after: f64, mode: InterventionMode) -> Result<f64> {
    if before == 0.0 || !before.is_finite() {
        return Err(KnError::Degenerate(format!("pre-intervention value {before} cannot be divided by")));
    }
    Ok(mode.sign() * (after - before) / before.abs())
}

/// Scales every neuron in `target_set` and reports the answer-probability change.
pub fn manipulate_neurons<T: Scalar>(
    model: &Model<T>,
    query: &[u32],
    answer: u32,
    target: Target,
    target_set: &BTreeSet<NeuronId>,
    mode: InterventionMode,
    factors: Factors,
) -> Result<InterventionResult> {
    if target_set.is_empty() {
        return Err(KnError::InvalidInput(format!("{} target set is empty", target.as_str())));
    }
    let before = model.answer_probability(query, answer, &OverrideSpec::none())?;
    let spec = OverrideSpec::neurons(target_set, mode).with_factors(factors.suppress, factors.enhance);
    let after = model.answer_probability(query, answer, &spec)?;
    Ok(InterventionResult {
        target,
        mode,
        prob_before: before,
        prob_after: after,
        delta_prob: signed_relative_change(before, after, mode)?,
        delta_value: None,
    })
}

/// Knowledge-synapse set: attention columns whose row-sum exceeds `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsSet {
    pub synapses: BTreeSet<SynapseId>,
    pub tau: f64,
    pub alpha: f64,
}

/// Locates synapses in a flat `[layer, head, row, column]` attention tensor.
///
/// `tau = alpha * sum(A) / (C * L * H)`; column `(c, l, h)` is kept when
/// `sum_r A[l, h, r, c] > tau`.
pub fn locate_synapses_in(attention: &[f64], shape: [usize; 4], alpha: f64) -> Result<KsSet> {
    let [l_n, h_n, r_n, c_n] = shape;
    if shape.contains(&0) {
        return Err(KnError::InvalidInput("empty attention tensor".into()));
    }
    if attention.len() != shape.iter().product::<usize>() {
        return Err(KnError::ShapeMismatch(format!("attention has {} values for shape {shape:?}", attention.len())));
    }
    if !(alpha > 0.0) {
        return Err(KnError::InvalidInput(format!("alpha {alpha} must be > 0")));
    }
    let mut column_sums = vec![0.0; l_n * h_n * c_n];
    for lh in 0..l_n * h_n {
        for r in 0..r_n {
            let row = &attention[(lh * r_n + r) * c_n..(lh * r_n + r + 1) * c_n];
            for (s, &a) in column_sums[lh * c_n..(lh + 1) * c_n].iter_mut().zip(row) {
                *s += a;
            }
        }
    }
    let total: f64 = column_sums.iter().sum();
    let tau = alpha * total / (c_n * l_n * h_n) as f64;
    let synapses = column_sums
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau)
        .map(|(j, _)| {
            let (lh, c) = (j / c_n, j % c_n);
            SynapseId::new(c, lh / h_n, lh % h_n)
        })
        .collect();
    Ok(KsSet { synapses, tau, alpha })
}

pub fn locate_synapses<T: Scalar>(trace: &ActivationTrace<T>, alpha: f64) -> Result<KsSet> {
    let a = &trace.attention_scores;
    let shape = [a.shape[0], a.shape[1], a.shape[2], a.shape[3]];
    let data: Vec<f64> = a.data.iter().map(|v| v.as_f64()).collect();
    locate_synapses_in(&data, shape, alpha)
}

/// Neuron sets whose activations are watched during a synapse intervention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchSets {
    pub kn: BTreeSet<NeuronId>,
    pub neighbor_kn: BTreeSet<NeuronId>,
    pub non_kn: BTreeSet<NeuronId>,
}

impl WatchSets {
    /// `kn` = the query's own set; `neighbor_kn` = other queries' neurons not in
    /// it; `non_kn` = every neuron outside all neighbor sets.
    pub fn from_bundle(bundle: &NeuronSetBundle, n_layers: usize, d_ff: usize) -> Self {
        let neighbor_kn: BTreeSet<NeuronId> = bundle.union_set.difference(&bundle.self_set).copied().collect();
        let non_kn = (0..n_layers)
            .flat_map(|l| (0..d_ff).map(move |p| NeuronId::new(l, p)))
            .filter(|n| !bundle.self_set.contains(n) && !bundle.union_set.contains(n))
            .collect();
        Self {
            kn: bundle.self_set.clone(),
            neighbor_kn,
            non_kn,
        }
    }
}

fn mean_activation<T: Scalar>(acts: &[Vec<T>], set: &BTreeSet<NeuronId>) -> f64 {
    set.iter().map(|n| acts[n.layer][n.position].as_f64()).sum::<f64>() / set.len() as f64
}

/// Scales the attention at every synapse in `ks` and reports, for each
/// non-empty watch set, the relative change of its mean final-position
/// activation together with the answer-probability change.
pub fn manipulate_synapses<T: Scalar>(
    model: &Model<T>,
    query: &[u32],
    answer: u32,
    ks: &KsSet,
    mode: InterventionMode,
    watch: &WatchSets,
    factors: Factors,
) -> Result<Vec<InterventionResult>> {
    if ks.synapses.is_empty() {
        return Err(KnError::InvalidInput("knowledge-synapse set is empty".into()));
    }
    let spec = OverrideSpec::synapses(&ks.synapses, mode).with_factors(factors.suppress, factors.enhance);
    let before = model.forward(query, &OverrideSpec::none())?;
    let after = model.forward(query, &spec)?;
    model.check_answer(answer)?;
    let prob = |t: &ActivationTrace<T>| {
        let logits: Vec<f64> = t.final_logits().iter().map(|v| v.as_f64()).collect();
        crate::model::log_softmax_at(&logits, answer as usize).exp()
    };
    let (p0, p1) = (prob(&before), prob(&after));
    let delta_prob = signed_relative_change(p0, p1, mode)?;
    let (a0, a1) = (before.final_activations(), after.final_activations());
    let mut out = Vec::new();
    for (target, set) in [
        (Target::Ks, &watch.kn),
        (Target::NeighborKn, &watch.neighbor_kn),
        (Target::NonKn, &watch.non_kn),
    ] {
        if set.is_empty() {
            continue;
        }
        let dv = signed_relative_change(mean_activation(&a0, set), mean_activation(&a1, set), mode)?;
        out.push(InterventionResult {
            target,
            mode,
            prob_before: p0,
            prob_after: p1,
            delta_prob,
            delta_value: Some(dv),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const RESULTS_HEADER: &str = "fact_id,query_index,target,mode,prob_before,prob_after,delta_prob,delta_value";

pub fn results_csv_rows(fact_id: &str, query_index: usize, results: &[InterventionResult], out: &mut String) {
    for r in results {
        let _ = writeln!(
            out,
            "{fact_id},{query_index},{},{},{},{},{},{}",
            r.target.as_str(),
            r.mode.as_str(),
            r.prob_before,
            r.prob_after,
            r.delta_prob,
            r.delta_value.map(|v| v.to_string()).unwrap_or_default()
        );
    }
}

pub const HEATMAP_HEADER: &str = "condition,layer,neuron,activation,is_kn";

/// Final-position activations before and after an intervention, one row per neuron.
pub fn heatmap_csv<T: Scalar>(before: &[Vec<T>], after: &[Vec<T>], kn: &BTreeSet<NeuronId>) -> String {
    let mut out = format!("{HEATMAP_HEADER}\n");
    for (cond, acts) in [("before", before), ("after", after)] {
        for (l, row) in acts.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                let is_kn = kn.contains(&NeuronId::new(l, p));
                let _ = writeln!(out, "{cond},{l},{p},{},{}", v.as_f64(), u8::from(is_kn));
            }
        }
    }
    out
}

pub const DISTRIBUTION_HEADER: &str = "fact_id,class,neuron_kind,condition,mean_activation";

/// Mean activation of each watch set before and after a synapse intervention.
pub fn distribution_rows<T: Scalar>(
    fact_id: &str,
    class: &str,
    before: &[Vec<T>],
    after: &[Vec<T>],
    watch: &WatchSets,
    out: &mut String,
) {
    for (kind, set) in [("kn", &watch.kn), ("neighbor_kn", &watch.neighbor_kn), ("non_kn", &watch.non_kn)] {
        if set.is_empty() {
            continue;
        }
        for (cond, acts) in [("before", before), ("after", after)] {
            let _ = writeln!(out, "{fact_id},{class},{kind},{cond},{}", mean_activation(acts, set));
        }
    }
}
