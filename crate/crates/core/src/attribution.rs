// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge-neuron attribution: integrated gradients (IG), sequential
//! integrated gradients (SIG) and anchor-masked integrated gradients (AMIG),
//! all integrated in activation space at the final input position.
//!
//! Every method is a right Riemann sum along a straight path from a baseline
//! activation `w'` to the recorded activation `w̄`:
//!
//! ```text
//! Attr = (w̄ - w') / m * sum_{k=1..m} dP(w' + k/m (w̄ - w')) / dw
//! ```
//!
//! IG uses `w' = 0`, SIG one masked-word baseline per input position and AMIG
//! the activations of an all-eos sentence.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KnError, Result};
use crate::model::{GradientSession, Model, NeuronId, Scalar};

pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_SELECTION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ig,
    Sig,
    Amig,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ig, Method::Sig, Method::Amig];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ig => "ig",
            Self::Sig => "sig",
            Self::Amig => "amig",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = KnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ig" => Ok(Self::Ig),
            "sig" => Ok(Self::Sig),
            "amig" => Ok(Self::Amig),
            other => Err(KnError::InvalidInput(format!("unknown attribution method {other:?}"))),
        }
    }
}

/// Per-neuron attribution scores, `[layer][d_ff]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub scores: Vec<Vec<f64>>,
    pub method: Method,
    pub query_id: String,
    pub steps_used: usize,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.scores.iter().flatten().sum()
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `layer,neuron,score` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,neuron,score\n");
        for (l, row) in self.scores.iter().enumerate() {
            for (p, s) in row.iter().enumerate() {
                out.push_str(&format!("{l},{p},{s}\n"));
            }
        }
        out
    }

    /// Parses the output of [`AttributionMap::to_csv`].
    pub fn from_csv(text: &str, method: Method, query_id: &str, steps_used: usize) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("layer,neuron,score") {
            return Err(KnError::parse(query_id, "attribution CSV header mismatch"));
        }
        let mut scores: Vec<Vec<f64>> = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || KnError::parse(format!("{query_id}:{}", i + 2), format!("malformed row {line:?}"));
            let mut f = line.split(',');
            let (Some(l), Some(p), Some(s), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            let l: usize = l.parse().map_err(|_| bad())?;
            let p: usize = p.parse().map_err(|_| bad())?;
            let s: f64 = s.parse().map_err(|_| bad())?;
            if l == scores.len() {
                scores.push(Vec::new());
            }
            if l + 1 != scores.len() || p != scores[l].len() {
                return Err(bad());
            }
            scores[l].push(s);
        }
        Ok(Self {
            scores,
            method,
            query_id: query_id.into(),
            steps_used,
        })
    }
}

/// Thresholded knowledge-neuron set of one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnSet {
    pub neurons: BTreeSet<NeuronId>,
    pub query_id: String,
    pub method: Method,
    /// Stored as a decimal string so the set stays `Eq`.
    pub selection_fraction: String,
    /// `false` when the source map had no positive score.
    pub defined: bool,
}

impl KnSet {
    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }
}

/// Straight-line right Riemann sum from `start` to `end`.
///
/// `grad` returns `dP/dw` at a path point. Steps are evaluated in parallel
/// and summed in step order.
pub fn path_integral<F>(start: &[Vec<f64>], end: &[Vec<f64>], steps: usize, grad: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync,
{
    if steps == 0 {
        return Err(KnError::InvalidInput("steps must be >= 1".into()));
    }
    if start.len() != end.len() || start.iter().zip(end).any(|(a, b)| a.len() != b.len()) {
        return Err(KnError::ShapeMismatch("path endpoints differ in shape".into()));
    }
    let m = steps as f64;
    let per_step: Vec<Vec<Vec<f64>>> = (1..=steps)
        .into_par_iter()
        .map(|k| {
            let a = k as f64 / m;
            let point: Vec<Vec<f64>> = start
                .iter()
                .zip(end)
                .map(|(s, e)| s.iter().zip(e).map(|(&s, &e)| s + a * (e - s)).collect())
                .collect();
            grad(&point)
        })
        .collect::<Result<_>>()?;
    let mut acc: Vec<Vec<f64>> = start.iter().map(|r| vec![0.0; r.len()]).collect();
    for g in &per_step {
        for (ar, gr) in acc.iter_mut().zip(g) {
            for (a, &v) in ar.iter_mut().zip(gr) {
                *a += v;
            }
        }
    }
    for ((ar, s), e) in acc.iter_mut().zip(start).zip(end) {
        for ((a, &s), &e) in ar.iter_mut().zip(s).zip(e) {
            *a *= (e - s) / m;
        }
    }
    Ok(acc)
}

fn to_f64<T: Scalar>(v: &[Vec<T>]) -> Vec<Vec<f64>> {
    v.iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
}

fn from_f64<T: Scalar>(v: &[Vec<f64>]) -> Vec<Vec<T>> {
    v.iter().map(|r| r.iter().map(|&x| T::lit(x)).collect()).collect()
}

fn session_integral<T: Scalar>(
    session: &GradientSession<'_, T>,
    start: &[Vec<f64>],
    end: &[Vec<f64>],
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    path_integral(start, end, steps, |point| {
        let (_, g) = session.gradients(&from_f64::<T>(point))?;
        Ok(to_f64(&g))
    })
}

fn map(scores: Vec<Vec<f64>>, method: Method, query_id: &str, steps: usize) -> AttributionMap {
    AttributionMap {
        scores,
        method,
        query_id: query_id.into(),
        steps_used: steps,
    }
}

/// Integrated gradients from the all-zero activation baseline.
pub fn ig_attribution<T: Scalar>(
    model: &Model<T>,
    query_id: &str,
    tokens: &[u32],
    answer: u32,
    steps: usize,
) -> Result<AttributionMap> {
    let session = GradientSession::new(model, tokens, answer)?;
    let end = to_f64(session.natural_activations());
    let start: Vec<Vec<f64>> = end.iter().map(|r| vec![0.0; r.len()]).collect();
    let scores = session_integral(&session, &start, &end, steps)?;
    Ok(map(scores, Method::Ig, query_id, steps))
}

/// Sequential integrated gradients with one masked-word baseline per position.
///
/// The per-word maps are summed and divided by the Frobenius norm of the
/// stacked per-word tensor. A query whose masking changes no activation
/// yields the all-zero map.
pub fn sig_attribution<T: Scalar>(
    model: &Model<T>,
    query_id: &str,
    tokens: &[u32],
    answer: u32,
    steps: usize,
    mask_token: u32,
) -> Result<AttributionMap> {
    model.check_answer(mask_token)?;
    let session = GradientSession::new(model, tokens, answer)?;
    let end = to_f64(session.natural_activations());
    let mut total: Vec<Vec<f64>> = end.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut sq = 0.0;
    for i in 0..tokens.len() {
        let mut masked = tokens.to_vec();
        masked[i] = mask_token;
        let start = to_f64(&model.final_activations(&masked, &Default::default())?);
        let word = session_integral(&session, &start, &end, steps)?;
        for (tr, wr) in total.iter_mut().zip(&word) {
            for (t, &w) in tr.iter_mut().zip(wr) {
                *t += w;
                sq += w * w;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > 0.0 {
        total.iter_mut().flatten().for_each(|v| *v /= norm);
    }
    Ok(map(total, Method::Sig, query_id, steps))
}

/// Anchor-masked integrated gradients from the all-eos sentence, normalized to unit sum.
///
/// Fails with [`KnError::Degenerate`] when the raw map sums to (numerically) zero.
pub fn amig_attribution<T: Scalar>(
    model: &Model<T>,
    query_id: &str,
    tokens: &[u32],
    answer: u32,
    steps: usize,
) -> Result<AttributionMap> {
    let session = GradientSession::new(model, tokens, answer)?;
    let end = to_f64(session.natural_activations());
    let eos = vec![model.tokenizer.eos_id(); tokens.len()];
    let start = to_f64(&model.final_activations(&eos, &Default::default())?);
    let mut scores = session_integral(&session, &start, &end, steps)?;
    normalize_unit_sum(&mut scores)?;
    Ok(map(scores, Method::Amig, query_id, steps))
}

fn normalize_unit_sum(scores: &mut [Vec<f64>]) -> Result<()> {
    let sum: f64 = scores.iter().flatten().sum();
    let l1: f64 = scores.iter().flatten().map(|v| v.abs()).sum();
    if !(sum.is_finite() && l1 > 0.0 && sum.abs() > 1e-9 * l1) {
        return Err(KnError::Degenerate(format!(
            "attribution map cannot be normalized (sum {sum:e}, l1 {l1:e})"
        )));
    }
    scores.iter_mut().flatten().for_each(|v| *v /= sum);
    Ok(())
}

/// Dispatches to the attribution method. SIG masks with `eos`.
pub fn attribute<T: Scalar>(
    model: &Model<T>,
    method: Method,
    query_id: &str,
    tokens: &[u32],
    answer: u32,
    steps: usize,
) -> Result<AttributionMap> {
    match method {
        Method::Ig => ig_attribution(model, query_id, tokens, answer, steps),
        Method::Sig => sig_attribution(model, query_id, tokens, answer, steps, model.tokenizer.eos_id()),
        Method::Amig => amig_attribution(model, query_id, tokens, answer, steps),
    }
}

/// Neurons scoring at least `fraction * max`. A map without a positive score
/// gives an empty set with `defined = false`.
pub fn select_kns(map: &AttributionMap, fraction: f64) -> Result<KnSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(KnError::InvalidInput(format!("selection fraction {fraction} outside (0, 1]")));
    }
    let max = map.max();
    let defined = max > 0.0;
    let neurons = if defined {
        let cut = fraction * max;
        map.scores
            .iter()
            .enumerate()
            .flat_map(|(l, row)| {
                row.iter()
                    .enumerate()
                    .filter(move |(_, &s)| s >= cut)
                    .map(move |(p, _)| NeuronId::new(l, p))
            })
            .collect()
    } else {
        BTreeSet::new()
    };
    Ok(KnSet {
        neurons,
        query_id: map.query_id.clone(),
        method: map.method,
        selection_fraction: fraction.to_string(),
        defined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::toy_model;
    use proptest::prelude::*;

    fn one(v: f64) -> Vec<Vec<f64>> {
        vec![vec![v]]
    }

    #[test]
    fn linear_surrogate_is_exact() {
        for m in [1, 3, 20, 77] {
            let a = path_integral(&one(0.0), &one(2.0), m, |_| Ok(one(3.0))).unwrap();
            assert_eq!(a[0][0], 6.0);
        }
    }

    #[test]
    fn zero_path_gives_zero_map() {
        let a = path_integral(&one(0.0), &one(0.0), 20, |_| Ok(one(5.0))).unwrap();
        assert_eq!(a[0][0], 0.0);
        assert!(path_integral(&one(0.0), &one(1.0), 0, |_| Ok(one(1.0))).is_err());
    }

    #[test]
    fn quadratic_surrogate_right_sum() {
        // P(w) = w^2 on [0, 1]: right sum of 2w gives 1 + 1/m.
        let m = 10;
        let a = path_integral(&one(0.0), &one(1.0), m, |p| Ok(one(2.0 * p[0][0]))).unwrap();
        assert!((a[0][0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn amig_is_normalized_and_deterministic() {
        let m = toy_model(42);
        let toks = m.tokenize("the cat sat").unwrap();
        let a = amig_attribution(&m, "q", &toks, 17, 8).unwrap();
        assert!((a.total() - 1.0).abs() < 1e-6);
        assert_eq!(a, amig_attribution(&m, "q", &toks, 17, 8).unwrap());
    }

    #[test]
    fn amig_all_eos_query_is_degenerate() {
        let m = toy_model(42);
        let eos = m.tokenizer.eos_id();
        let err = amig_attribution(&m, "q", &[eos, eos], 3, 5).unwrap_err();
        assert!(matches!(err, KnError::Degenerate(_)));
    }

    #[test]
    fn sig_on_all_mask_query_is_zero() {
        let m = toy_model(42);
        let eos = m.tokenizer.eos_id();
        let a = sig_attribution(&m, "q", &[eos, eos, eos], 3, 5, eos).unwrap();
        assert!(a.scores.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn sig_single_token_matches_masked_ig_direction() {
        let m = toy_model(7).cast::<f64>();
        let eos = m.tokenizer.eos_id();
        let sig = sig_attribution(&m, "q", &[12], 30, 6, eos).unwrap();
        let session = GradientSession::new(&m, &[12], 30).unwrap();
        let end = session.natural_activations().to_vec();
        let start = m.final_activations(&[eos], &Default::default()).unwrap();
        let raw = session_integral(&session, &start, &end, 6).unwrap();
        let norm = raw.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in sig.scores.iter().flatten().zip(raw.iter().flatten()) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn select_kns_examples() {
        let m = AttributionMap {
            scores: vec![vec![1.0, 0.25], vec![0.19, 0.05]],
            method: Method::Ig,
            query_id: "q".into(),
            steps_used: 20,
        };
        let s = select_kns(&m, 0.2).unwrap();
        assert_eq!(s.neurons, [NeuronId::new(0, 0), NeuronId::new(0, 1)].into_iter().collect());
        let top = select_kns(&m, 1.0).unwrap();
        assert_eq!(top.neurons.len(), 1);
        let zero = AttributionMap {
            scores: vec![vec![0.0; 2]; 2],
            ..m
        };
        let z = select_kns(&zero, 0.2).unwrap();
        assert!(z.is_empty() && !z.defined);
        assert!(select_kns(&zero, 0.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = toy_model(3);
        let toks = m.tokenize("hi there").unwrap();
        let a = ig_attribution(&m, "f/0", &toks, 4, 3).unwrap();
        let back = AttributionMap::from_csv(&a.to_csv(), Method::Ig, "f/0", 3).unwrap();
        assert_eq!(back, a);
        assert!(AttributionMap::from_csv("x\n", Method::Ig, "f", 1).is_err());
    }

    proptest! {
        #[test]
        fn select_kns_is_scale_invariant(
            vals in proptest::collection::vec(-1.0f64..1.0, 8),
            scale in prop_oneof![Just(0.5f64), Just(2.0), Just(4.0), Just(0.25)],
            frac in 0.05f64..1.0,
        ) {
            let m = AttributionMap {
                scores: vec![vals[..4].to_vec(), vals[4..].to_vec()],
                method: Method::Sig,
                query_id: "q".into(),
                steps_used: 1,
            };
            let scaled = AttributionMap {
                scores: m.scores.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect(),
                ..m.clone()
            };
            prop_assert_eq!(select_kns(&m, frac).unwrap().neurons, select_kns(&scaled, frac).unwrap().neurons);
        }
    }
}
