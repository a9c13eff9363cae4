// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge erasure and update on MLP value vectors, reversible edit records,
//! the consistency-aware neuron score and sequential editing.
//!
//! The value vector of neuron `(l, p)` is row `p` of layer `l`'s MLP second
//! projection. Erasure zeroes it; update moves it by
//! `-lambda1 * E(o) + lambda2 * E(o')`, with `E` the token-embedding row of
//! the first object token.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KnError, Result};
use crate::evaluation::EditEvaluation;
use crate::model::{Model, NeuronId};

pub const DEFAULT_LAMBDA: f64 = 2.0;
pub const DEFAULT_BETA1: f64 = 0.7;
pub const DEFAULT_BETA2: f64 = 0.3;
pub const DEFAULT_CAS_RATIO: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Erase,
    Update,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Erase => "erase",
            Self::Update => "update",
        }
    }
}

/// How the edited neurons were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Knowledge neurons of the edited query alone.
    NI,
    /// Union of the knowledge neurons of every neighbor query.
    NU,
    /// Consistency-aware score selection.
    Cas,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NI => "n_i",
            Self::NU => "n_u",
            Self::Cas => "cas",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub fact_id: String,
    pub mode: EditMode,
    pub neuron_set: BTreeSet<NeuronId>,
    pub selection: Selection,
    pub lambda1: f64,
    pub lambda2: f64,
    /// First token of the original object.
    pub object_token: u32,
    /// First token of the new object; required for update.
    pub new_object_token: Option<u32>,
}

impl EditPlan {
    pub fn erase(fact_id: impl Into<String>, neurons: BTreeSet<NeuronId>, selection: Selection, object_token: u32) -> Self {
        Self {
            fact_id: fact_id.into(),
            mode: EditMode::Erase,
            neuron_set: neurons,
            selection,
            lambda1: DEFAULT_LAMBDA,
            lambda2: DEFAULT_LAMBDA,
            object_token,
            new_object_token: None,
        }
    }

    pub fn update(
        fact_id: impl Into<String>,
        neurons: BTreeSet<NeuronId>,
        selection: Selection,
        object_token: u32,
        new_object_token: u32,
    ) -> Self {
        Self {
            mode: EditMode::Update,
            new_object_token: Some(new_object_token),
            ..Self::erase(fact_id, neurons, selection, object_token)
        }
    }

    pub fn validate(&self, model: &Model<f32>) -> Result<()> {
        if self.mode == EditMode::Update && self.new_object_token.is_none() {
            return Err(KnError::InvalidInput("update requires a new object token".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(KnError::InvalidInput("lambdas must be >= 0".into()));
        }
        for n in &self.neuron_set {
            n.check(&model.config)?;
        }
        for t in std::iter::once(self.object_token).chain(self.new_object_token) {
            model.check_answer(t)?;
        }
        let w = &model.weights;
        if w.token_embedding.shape[1] != w.layers[0].mlp_out.shape[1] {
            return Err(KnError::ShapeMismatch(format!(
                "embedding width {} differs from value-vector width {}",
                w.token_embedding.shape[1],
                w.layers[0].mlp_out.shape[1]
            )));
        }
        Ok(())
    }
}

/// One saved value vector: its pre-edit and post-edit contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedRow {
    pub neuron: NeuronId,
    pub original: Vec<f32>,
    pub edited: Vec<f32>,
}

/// A reversible edit. Serializable so an interrupted run can restore its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub plan: EditPlan,
    pub saved_slices: Vec<SavedRow>,
    pub applied: bool,
}

fn value_row(model: &Model<f32>, n: NeuronId) -> &[f32] {
    model.weights.layers[n.layer].mlp_out.row(n.position)
}

fn value_row_mut(model: &mut Model<f32>, n: NeuronId) -> &mut [f32] {
    model.weights.layers[n.layer].mlp_out.row_mut(n.position)
}

#[allow(clippy::cast_possible_truncation)]
fn edited_row(model: &Model<f32>, plan: &EditPlan, row: &[f32]) -> Vec<f32> {
    match plan.mode {
        EditMode::Erase => vec![0.0; row.len()],
        EditMode::Update => {
            let emb = &model.weights.token_embedding;
            let old = emb.row(plan.object_token as usize);
            let new = emb.row(plan.new_object_token.expect("validated") as usize);
            let (l1, l2) = (plan.lambda1 as f32, plan.lambda2 as f32);
            row.iter()
                .zip(old)
                .zip(new)
                .map(|((&w, &e), &e2)| w - l1 * e + l2 * e2)
                .collect()
        }
    }
}

impl EditRecord {
    /// Unapplied record for `plan`.
    pub fn new(plan: EditPlan) -> Self {
        Self {
            plan,
            saved_slices: Vec::new(),
            applied: false,
        }
    }

    /// Saves the targeted rows, then writes their edited values.
    pub fn apply(&mut self, model: &mut Model<f32>) -> Result<()> {
        if self.applied {
            return Err(KnError::Edit(format!("edit for fact {} is already applied", self.plan.fact_id)));
        }
        self.plan.validate(model)?;
        self.saved_slices = self
            .plan
            .neuron_set
            .iter()
            .map(|&n| {
                let original = value_row(model, n).to_vec();
                let edited = edited_row(model, &self.plan, &original);
                SavedRow {
                    neuron: n,
                    original,
                    edited,
                }
            })
            .collect();
        for s in &self.saved_slices {
            value_row_mut(model, s.neuron).copy_from_slice(&s.edited);
        }
        self.applied = true;
        Ok(())
    }

    /// Writes the saved pre-edit rows back.
    ///
    /// Fails if the record is not applied or if any edited row has been
    /// modified since the edit (stale record).
    pub fn restore(&mut self, model: &mut Model<f32>) -> Result<()> {
        if !self.applied {
            return Err(KnError::Edit(format!("edit for fact {} is not applied", self.plan.fact_id)));
        }
        for s in &self.saved_slices {
            s.neuron.check(&model.config)?;
            let current = value_row(model, s.neuron);
            let same = current.len() == s.edited.len()
                && current.iter().zip(&s.edited).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(KnError::Edit(format!(
                    "stale record: value vector {} changed since the edit of fact {}",
                    s.neuron, self.plan.fact_id
                )));
            }
        }
        for s in self.saved_slices.iter().rev() {
            value_row_mut(model, s.neuron).copy_from_slice(&s.original);
        }
        self.applied = false;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("record serializes");
        fs::write(path, json).map_err(|e| KnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| KnError::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| KnError::parse(path.display().to_string(), e))
    }
}

/// Applies `plan` and returns the record needed to undo it.
pub fn apply_edit(model: &mut Model<f32>, plan: EditPlan) -> Result<EditRecord> {
    let mut record = EditRecord::new(plan);
    record.apply(model)?;
    Ok(record)
}

/// Undoes an applied edit.
pub fn restore(model: &mut Model<f32>, record: &mut EditRecord) -> Result<()> {
    record.restore(model)
}

// ---------------------------------------------------------------------------
// Consistency-aware score
// ---------------------------------------------------------------------------

/// `beta1 * mean - beta2 * std` of per-query activations, `[layer][d_ff]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasMap {
    pub scores: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub k: usize,
}

/// Consistency-aware scores from `k >= 2` activation snapshots (`[layer][d_ff]`
/// each), with the population standard deviation.
pub fn cas_scores(snapshots: &[Vec<Vec<f64>>], beta1: f64, beta2: f64) -> Result<CasMap> {
    let k = snapshots.len();
    if k < 2 {
        return Err(KnError::InvalidInput(format!("CAS needs k >= 2 snapshots, got {k}")));
    }
    if !(beta1 >= 0.0 && beta2 >= 0.0) {
        return Err(KnError::InvalidInput("betas must be >= 0".into()));
    }
    let shape: Vec<usize> = snapshots[0].iter().map(Vec::len).collect();
    if snapshots
        .iter()
        .any(|s| s.iter().map(Vec::len).collect::<Vec<_>>() != shape)
    {
        return Err(KnError::ShapeMismatch("activation snapshots differ in shape".into()));
    }
    let kf = k as f64;
    let scores = shape
        .iter()
        .enumerate()
        .map(|(l, &width)| {
            (0..width)
                .map(|p| {
                    let mean = snapshots.iter().map(|s| s[l][p]).sum::<f64>() / kf;
                    let var = snapshots.iter().map(|s| (s[l][p] - mean).powi(2)).sum::<f64>() / kf;
                    beta1 * mean - beta2 * var.sqrt()
                })
                .collect()
        })
        .collect();
    Ok(CasMap {
        scores,
        beta1,
        beta2,
        k,
    })
}

/// Neurons whose score strictly exceeds `ratio * max`; empty (flagged `false`)
/// when the maximum is not positive.
pub fn select_cas_kns(map: &CasMap, ratio: f64) -> Result<(BTreeSet<NeuronId>, bool)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(KnError::InvalidInput(format!("CAS ratio {ratio} outside (0, 1]")));
    }
    let max = map
        .scores
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Ok((BTreeSet::new(), false));
    }
    let cut = ratio * max;
    let set = map
        .scores
        .iter()
        .enumerate()
        .flat_map(|(l, row)| {
            row.iter()
                .enumerate()
                .filter(move |(_, &v)| v > cut)
                .map(move |(p, _)| NeuronId::new(l, p))
        })
        .collect();
    Ok((set, true))
}

/// The `N_u` edit set: union of per-query knowledge-neuron sets.
pub fn union_of<'a>(sets: impl IntoIterator<Item = &'a BTreeSet<NeuronId>>) -> BTreeSet<NeuronId> {
    sets.into_iter().flatten().copied().collect()
}

// ---------------------------------------------------------------------------
// Sequential editing
// ---------------------------------------------------------------------------

/// Result of a sequential editing run. The model is left edited; pass
/// `records` to [`restore_all`] to undo the whole sequence.
#[derive(Debug, Clone)]
pub struct SequentialOutcome {
    pub evaluations: Vec<EditEvaluation>,
    pub records: Vec<EditRecord>,
}

/// Applies `plans` cumulatively, calling `evaluate` after each edit.
///
/// A failing edit aborts the run; the error names its position and the
/// edits applied so far are rolled back.
pub fn sequential_edit<F>(model: &mut Model<f32>, plans: &[EditPlan], mut evaluate: F) -> Result<SequentialOutcome>
where
    F: FnMut(&Model<f32>, usize, &EditPlan) -> Result<EditEvaluation>,
{
    if plans.is_empty() {
        return Err(KnError::InvalidInput("sequential editing needs at least one plan".into()));
    }
    let mut records: Vec<EditRecord> = Vec::with_capacity(plans.len());
    let mut evaluations = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter().enumerate() {
        let step = apply_edit(model, plan.clone()).and_then(|rec| {
            records.push(rec);
            evaluate(model, i, plan)
        });
        match step {
            Ok(e) => evaluations.push(e),
            Err(e) => {
                restore_all(model, &mut records)?;
                return Err(KnError::Edit(format!("sequential edit {i} (fact {}) failed: {e}", plan.fact_id)));
            }
        }
    }
    Ok(SequentialOutcome { evaluations, records })
}

/// Restores applied records in reverse order of application.
pub fn restore_all(model: &mut Model<f32>, records: &mut [EditRecord]) -> Result<()> {
    for r in records.iter_mut().rev().filter(|r| r.applied) {
        r.restore(model)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::toy_model;

    fn set(ns: &[(usize, usize)]) -> BTreeSet<NeuronId> {
        ns.iter().map(|&(l, p)| NeuronId::new(l, p)).collect()
    }

    #[test]
    fn erase_zeroes_rows_and_restore_is_exact() {
        let mut m = toy_model(42);
        let before = m.weights_hash();
        let mut rec = apply_edit(&mut m, EditPlan::erase("f", set(&[(0, 3), (1, 60)]), Selection::NI, 5)).unwrap();
        assert!(m.weights.layers[0].mlp_out.row(3).iter().all(|&v| v == 0.0));
        assert!(m.weights.layers[1].mlp_out.row(60).iter().all(|&v| v == 0.0));
        assert_ne!(m.weights_hash(), before);
        restore(&mut m, &mut rec).unwrap();
        assert_eq!(m.weights_hash(), before);
        assert!(matches!(restore(&mut m, &mut rec), Err(KnError::Edit(_))));
    }

    #[test]
    fn update_with_zero_lambdas_is_identity() {
        let mut m = toy_model(42);
        let before = m.weights_hash();
        let mut plan = EditPlan::update("f", set(&[(0, 1)]), Selection::NI, 5, 9);
        plan.lambda1 = 0.0;
        plan.lambda2 = 0.0;
        apply_edit(&mut m, plan).unwrap();
        assert_eq!(m.weights_hash(), before);
    }

    #[test]
    fn update_shifts_by_scaled_embeddings() {
        let mut m = toy_model(42);
        let w = m.weights.layers[1].mlp_out.row(7).to_vec();
        let e = m.weights.token_embedding.row(5).to_vec();
        let e2 = m.weights.token_embedding.row(9).to_vec();
        apply_edit(&mut m, EditPlan::update("f", set(&[(1, 7)]), Selection::NI, 5, 9)).unwrap();
        let got = m.weights.layers[1].mlp_out.row(7);
        for i in 0..w.len() {
            assert_eq!(got[i], w[i] - 2.0 * e[i] + 2.0 * e2[i]);
        }
    }

    #[test]
    fn edit_errors() {
        let mut m = toy_model(1);
        let mut plan = EditPlan::erase("f", set(&[(0, 1)]), Selection::NI, 5);
        plan.mode = EditMode::Update;
        assert!(apply_edit(&mut m, plan).is_err());
        assert!(apply_edit(&mut m, EditPlan::erase("f", set(&[(2, 1)]), Selection::NI, 5)).is_err());
        let mut rec = apply_edit(&mut m, EditPlan::erase("f", set(&[(0, 1)]), Selection::NI, 5)).unwrap();
        assert!(matches!(rec.apply(&mut m), Err(KnError::Edit(_))));
        m.weights.layers[0].mlp_out.row_mut(1)[0] = 1.0;
        assert!(matches!(rec.restore(&mut m), Err(KnError::Edit(_))));
    }

    #[test]
    fn record_survives_serialization() {
        let mut m = toy_model(3);
        let before = m.weights_hash();
        let rec = apply_edit(&mut m, EditPlan::update("f", set(&[(0, 2), (1, 3)]), Selection::Cas, 4, 8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edit.json");
        rec.save(&path).unwrap();
        let mut back = EditRecord::load(&path).unwrap();
        assert_eq!(back, rec);
        back.restore(&mut m).unwrap();
        assert_eq!(m.weights_hash(), before);
    }

    #[test]
    fn cas_hand_cases() {
        let constant = vec![vec![vec![0.5]]; 3];
        let map = cas_scores(&constant, 0.7, 0.3).unwrap();
        assert!((map.scores[0][0] - 0.35).abs() < 1e-15);

        let snaps = vec![vec![vec![1.0]], vec![vec![0.0]], vec![vec![0.0]]];
        let map = cas_scores(&snaps, 0.7, 0.3).unwrap();
        let expected = 0.7 / 3.0 - 0.3 * 2f64.sqrt() / 3.0;
        assert!((map.scores[0][0] - expected).abs() < 1e-15);
        assert!((map.scores[0][0] - 0.0919).abs() < 1e-4);

        assert!(cas_scores(&snaps[..1], 0.7, 0.3).is_err());
        let ragged = vec![vec![vec![1.0, 2.0]], vec![vec![0.0]]];
        assert!(matches!(cas_scores(&ragged, 0.7, 0.3), Err(KnError::ShapeMismatch(_))));
    }

    #[test]
    fn cas_selection() {
        let map = CasMap {
            scores: vec![vec![1.0, 0.31, 0.29]],
            beta1: 0.7,
            beta2: 0.3,
            k: 2,
        };
        assert_eq!(select_cas_kns(&map, 0.3).unwrap(), (set(&[(0, 0), (0, 1)]), true));
        let neg = CasMap {
            scores: vec![vec![-1.0, 0.0]],
            ..map.clone()
        };
        assert_eq!(select_cas_kns(&neg, 0.3).unwrap(), (BTreeSet::new(), false));
        let single = CasMap {
            scores: vec![vec![0.0, 0.0], vec![0.0, 0.4]],
            ..map
        };
        assert_eq!(select_cas_kns(&single, 0.3).unwrap().0, set(&[(1, 1)]));
    }

    #[test]
    fn sequential_edits_accumulate_and_roll_back() {
        let mut m = toy_model(5);
        let before = m.weights_hash();
        let plans: Vec<EditPlan> = (0..3)
            .map(|i| EditPlan::erase(format!("f{i}"), set(&[(0, i), (1, 2 * i)]), Selection::NI, 5))
            .collect();
        let mut zeroed_rows = Vec::new();
        let mut out = sequential_edit(&mut m, &plans, |model, i, _| {
            let n = (0..64)
                .filter(|&p| model.weights.layers[0].mlp_out.row(p).iter().all(|&v| v == 0.0))
                .count();
            zeroed_rows.push(n);
            Ok(EditEvaluation {
                rel: 0.0,
                gen: 0.0,
                loc: 1.0,
                avg: 1.0 / 3.0,
                delta_ppl: i as f64,
                mode: EditMode::Erase,
            })
        })
        .unwrap();
        assert_eq!(zeroed_rows, vec![1, 2, 3]);
        assert_eq!(out.evaluations.len(), 3);
        restore_all(&mut m, &mut out.records).unwrap();
        assert_eq!(m.weights_hash(), before);

        let mut bad = plans.clone();
        bad[1].neuron_set = set(&[(9, 0)]);
        let dummy = out.evaluations[0];
        let err = sequential_edit(&mut m, &bad, |_, _, _| Ok(dummy.clone())).unwrap_err();
        assert!(err.to_string().contains("sequential edit 1"), "{err}");
        assert_eq!(m.weights_hash(), before);
    }
}
