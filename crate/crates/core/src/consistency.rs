// SPDX-License-Identifier: MIT OR Apache-2.0

//! Consistency of knowledge-neuron sets across paraphrased queries.
//!
//! A fact is consistent (`K_C`) when its neighbor queries share knowledge
//! neurons and inconsistent (`K_I`) otherwise. Classification uses the relaxed
//! score, which counts every neuron appearing in more than one query's set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribution::Method;
use crate::error::{KnError, Result};
use crate::model::NeuronId;

pub const DEFAULT_STATIC_THRESHOLD: f64 = 0.1;
pub const OTSU_BINS: usize = 256;
pub const SWEEP_LO: f64 = 0.04;
pub const SWEEP_HI: f64 = 0.80;
pub const SWEEP_STEP: f64 = 0.02;

/// Original (intersection) and relaxed (repeated-member) consistency scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsScores {
    pub original: f64,
    pub relaxed: f64,
    /// `false` when every set is empty (both scores are then reported as 0).
    pub defined: bool,
}

/// Consistency scores of `k >= 2` sets.
pub fn cs_scores<N: Ord>(sets: &[BTreeSet<N>]) -> Result<CsScores> {
    if sets.len() < 2 {
        return Err(KnError::InvalidInput(format!("consistency needs k >= 2 sets, got {}", sets.len())));
    }
    let mut counts: BTreeMap<&N, usize> = BTreeMap::new();
    for s in sets {
        for n in s {
            *counts.entry(n).or_default() += 1;
        }
    }
    let union = counts.len();
    if union == 0 {
        return Ok(CsScores {
            original: 0.0,
            relaxed: 0.0,
            defined: false,
        });
    }
    let all = counts.values().filter(|&&c| c == sets.len()).count();
    let repeated = counts.values().filter(|&&c| c > 1).count();
    Ok(CsScores {
        original: all as f64 / union as f64,
        relaxed: repeated as f64 / union as f64,
        defined: true,
    })
}

// ---------------------------------------------------------------------------
// Thresholds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Static,
    Otsu,
}

impl ThresholdKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Otsu => "otsu",
        }
    }
}

impl std::str::FromStr for ThresholdKind {
    type Err = KnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(Self::Static),
            "otsu" => Ok(Self::Otsu),
            other => Err(KnError::InvalidInput(format!("unknown threshold kind {other:?}"))),
        }
    }
}

/// 256-bin histogram of `values` over `[min, max]`; returns `(counts, min, width)`.
pub fn histogram(values: &[f64]) -> Result<([u64; OTSU_BINS], f64, f64)> {
    if values.len() < 2 {
        return Err(KnError::InvalidInput("Otsu needs at least 2 values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(KnError::InvalidInput("Otsu values must be finite".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(KnError::Degenerate("all values are equal".into()));
    }
    let width = (max - min) / OTSU_BINS as f64;
    let mut counts = [0u64; OTSU_BINS];
    for &v in values {
        let b = (((v - min) / width).floor() as usize).min(OTSU_BINS - 1);
        counts[b] += 1;
    }
    Ok((counts, min, width))
}

/// Otsu split index: bins `0..=t` form the lower class.
///
/// The between-class variance of split `t` is proportional to
/// `(s0*n1 - s1*n0)^2 / (n0*n1)` with bin indices as levels; candidates are
/// compared by exact integer cross-multiplication and ties keep the lower `t`.
pub fn otsu_split(counts: &[u64; OTSU_BINS]) -> Result<usize> {
    let n: u128 = counts.iter().map(|&c| u128::from(c)).sum();
    let s: u128 = counts.iter().enumerate().map(|(i, &c)| i as u128 * u128::from(c)).sum();
    let overflow = || KnError::OutOfRange("too many values for the exact Otsu comparison".into());
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(usize, u128, u128)> = None;
    for (t, &c) in counts.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += u128::from(c);
        s0 += t as u128 * u128::from(c);
        let (n1, s1) = (n - n0, s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (s0 * n1).abs_diff(s1 * n0);
        let num = diff.checked_mul(diff).ok_or_else(overflow)?;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num.checked_mul(bd).ok_or_else(overflow)? > bn.checked_mul(den).ok_or_else(overflow)?,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t)
        .ok_or_else(|| KnError::Degenerate("histogram has a single occupied bin".into()))
}

/// Otsu threshold: the upper edge of the last bin of the lower class.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    let (counts, min, width) = histogram(values)?;
    let t = otsu_split(&counts)?;
    Ok(min + (t + 1) as f64 * width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "K_C")]
    Consistent,
    #[serde(rename = "K_I")]
    Inconsistent,
    #[serde(rename = "undefined")]
    Undefined,
}

impl Class {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Consistent => "K_C",
            Self::Inconsistent => "K_I",
            Self::Undefined => "undefined",
        }
    }
}

/// `cs > threshold` is consistent, anything else inconsistent; `None` is undefined.
pub fn classify_value(cs: Option<f64>, threshold: f64) -> Class {
    match cs {
        None => Class::Undefined,
        Some(v) if v > threshold => Class::Consistent,
        Some(_) => Class::Inconsistent,
    }
}

pub fn classify(values: &[(String, Option<f64>)], threshold: f64) -> Result<Vec<(String, Class)>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(KnError::InvalidInput(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(values
        .iter()
        .map(|(id, cs)| (id.clone(), classify_value(*cs, threshold)))
        .collect())
}

// ---------------------------------------------------------------------------
// Welch's t-test
// ---------------------------------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(KnError::InvalidInput("each sample needs at least 2 values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb == 0.0 {
        return Err(KnError::Degenerate("both samples have zero variance".into()));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(WelchResult {
        t,
        df,
        p: student_t_two_sided(t, df),
    })
}

// ---------------------------------------------------------------------------
// Per-fact records and aggregate reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactConsistency {
    pub fact_id: String,
    pub relation: String,
    pub cs_original: f64,
    pub cs_relaxed: f64,
    pub defined: bool,
    pub neighbor_kn_sets: Vec<BTreeSet<NeuronId>>,
    pub classification: Class,
}

impl FactConsistency {
    /// Scores a fact from its neighbor sets; classification starts undefined.
    pub fn new(fact_id: &str, relation: &str, neighbor_kn_sets: Vec<BTreeSet<NeuronId>>) -> Result<Self> {
        let cs = cs_scores(&neighbor_kn_sets)?;
        Ok(Self {
            fact_id: fact_id.into(),
            relation: relation.into(),
            cs_original: cs.original,
            cs_relaxed: cs.relaxed,
            defined: cs.defined,
            neighbor_kn_sets,
            classification: Class::Undefined,
        })
    }

    pub fn cs(&self) -> Option<f64> {
        self.defined.then_some(self.cs_relaxed)
    }
}

/// Sets `classification` on every fact.
pub fn classify_facts(facts: &mut [FactConsistency], threshold: f64) {
    for f in facts {
        f.classification = classify_value(f.cs(), threshold);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub method: Method,
    pub threshold_kind: ThresholdKind,
    pub threshold_value: f64,
    pub n_facts: usize,
    pub n_undefined: usize,
    pub r_c: f64,
    pub r_i: f64,
    pub cs_c_mean: f64,
    pub cs_i_mean: f64,
    /// Absent when either class has fewer than two facts or no variance.
    pub welch: Option<WelchResult>,
    pub u_i: Option<f64>,
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        f64::NAN
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Threshold of `kind` for the defined relaxed scores in `facts`.
pub fn threshold_for(facts: &[FactConsistency], kind: ThresholdKind, static_threshold: f64) -> Result<f64> {
    match kind {
        ThresholdKind::Static => Ok(static_threshold),
        ThresholdKind::Otsu => {
            let v: Vec<f64> = facts.iter().filter_map(FactConsistency::cs).collect();
            otsu_threshold(&v)
        }
    }
}

/// Report of already classified facts.
pub fn report(method: Method, kind: ThresholdKind, threshold: f64, facts: &[FactConsistency]) -> ConsistencyReport {
    let cs_of = |c: Class| -> Vec<f64> {
        facts
            .iter()
            .filter(|f| f.classification == c)
            .map(|f| f.cs_relaxed)
            .collect()
    };
    let (kc, ki) = (cs_of(Class::Consistent), cs_of(Class::Inconsistent));
    let classified = (kc.len() + ki.len()) as f64;
    ConsistencyReport {
        method,
        threshold_kind: kind,
        threshold_value: threshold,
        n_facts: facts.len(),
        n_undefined: facts.len() - kc.len() - ki.len(),
        r_c: kc.len() as f64 / classified,
        r_i: ki.len() as f64 / classified,
        cs_c_mean: mean(&kc),
        cs_i_mean: mean(&ki),
        welch: welch_t_test(&kc, &ki).ok(),
        u_i: None,
    }
}

/// Classifies every method's facts under `kind` and reports them, with `U_I`:
/// the fraction of facts classified `K_I` by every method.
pub fn aggregate(
    per_method: &mut BTreeMap<Method, Vec<FactConsistency>>,
    kind: ThresholdKind,
    static_threshold: f64,
) -> Result<Vec<ConsistencyReport>> {
    let mut ids: Option<BTreeSet<String>> = None;
    for (m, facts) in per_method.iter() {
        let these: BTreeSet<String> = facts.iter().map(|f| f.fact_id.clone()).collect();
        if these.len() != facts.len() {
            return Err(KnError::InvalidInput(format!("method {m} lists a fact twice")));
        }
        match &ids {
            None => ids = Some(these),
            Some(prev) if *prev != these => {
                return Err(KnError::InvalidInput(format!("method {m} covers a different fact set")));
            }
            Some(_) => {}
        }
    }
    let mut reports = Vec::new();
    let mut inconsistent: BTreeMap<String, usize> = BTreeMap::new();
    for (&m, facts) in per_method.iter_mut() {
        let threshold = threshold_for(facts, kind, static_threshold)?;
        classify_facts(facts, threshold);
        for f in facts.iter().filter(|f| f.classification == Class::Inconsistent) {
            *inconsistent.entry(f.fact_id.clone()).or_default() += 1;
        }
        reports.push(report(m, kind, threshold, facts));
    }
    let n = ids.map_or(0, |s| s.len());
    if n > 0 {
        let all = inconsistent.values().filter(|&&c| c == per_method.len()).count();
        let u_i = all as f64 / n as f64;
        for r in &mut reports {
            r.u_i = Some(u_i);
        }
    }
    Ok(reports)
}

/// `(threshold, fraction of values <= threshold)` for thresholds `lo, lo+step, ..` up to `hi`.
pub fn threshold_sweep(values: &[f64], lo: f64, hi: f64, step: f64) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(KnError::InvalidInput("sweep needs at least one value".into()));
    }
    if !(lo < hi && step > 0.0) {
        return Err(KnError::InvalidInput(format!("bad sweep range [{lo}, {hi}] step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    let total = values.len() as f64;
    Ok((0..=n)
        .map(|j| {
            let t = lo + j as f64 * step;
            (t, values.iter().filter(|&&v| v <= t).count() as f64 / total)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const TABLE_HEADER: &str = "method,threshold_kind,threshold,n_facts,n_undefined,r_c,cs_c,r_i,cs_i,t,df,p";

/// Blank for absent or undefined (NaN) values.
fn opt(v: Option<f64>) -> String {
    v.filter(|x| !x.is_nan()).map(|x| x.to_string()).unwrap_or_default()
}

/// Table of reports; `U_I` rows are appended only when more than one method is present.
pub fn reports_csv(reports: &[ConsistencyReport]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.threshold_kind.as_str(),
            r.threshold_value,
            r.n_facts,
            r.n_undefined,
            opt(Some(r.r_c)),
            opt(Some(r.cs_c_mean)),
            opt(Some(r.r_i)),
            opt(Some(r.cs_i_mean)),
            opt(r.welch.map(|w| w.t)),
            opt(r.welch.map(|w| w.df)),
            opt(r.welch.map(|w| w.p)),
        );
    }
    out
}

pub const U_I_HEADER: &str = "threshold_kind,n_methods,u_i";

pub fn u_i_csv(reports: &[ConsistencyReport]) -> Option<String> {
    let kinds: BTreeSet<ThresholdKind> = reports.iter().map(|r| r.threshold_kind).collect();
    let mut out = format!("{U_I_HEADER}\n");
    let mut any = false;
    for k in kinds {
        let rs: Vec<_> = reports.iter().filter(|r| r.threshold_kind == k).collect();
        if rs.len() < 2 {
            continue;
        }
        any = true;
        let _ = writeln!(out, "{},{},{}", k.as_str(), rs.len(), opt(rs[0].u_i));
    }
    any.then_some(out)
}

pub const VIOLIN_HEADER: &str = "method,relation,fact_id,cs_original,cs_relaxed,defined";

pub fn violin_csv(per_method: &BTreeMap<Method, Vec<FactConsistency>>) -> String {
    let mut out = format!("{VIOLIN_HEADER}\n");
    for (m, facts) in per_method {
        for f in facts {
            let _ = writeln!(
                out,
                "{m},{},{},{},{},{}",
                f.relation, f.fact_id, f.cs_original, f.cs_relaxed, f.defined
            );
        }
    }
    out
}

pub const SWEEP_HEADER: &str = "method,threshold,fraction_below";

pub fn sweep_csv(curves: &BTreeMap<Method, Vec<(f64, f64)>>) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for (m, curve) in curves {
        for (t, f) in curve {
            let _ = writeln!(out, "{m},{t:.2},{f}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn cs_examples() {
        let same = cs_scores(&[s(&[1, 2]), s(&[1, 2]), s(&[1, 2])]).unwrap();
        assert_eq!((same.original, same.relaxed), (1.0, 1.0));
        let disjoint = cs_scores(&[s(&[1]), s(&[2]), s(&[3])]).unwrap();
        assert_eq!((disjoint.original, disjoint.relaxed), (0.0, 0.0));
        let chain = cs_scores(&[s(&[1, 2]), s(&[2, 3]), s(&[3, 4])]).unwrap();
        assert_eq!((chain.original, chain.relaxed), (0.0, 0.5));
        let empty = cs_scores(&[s(&[]), s(&[])]).unwrap();
        assert!(!empty.defined);
        assert!(cs_scores(&[s(&[1])]).is_err());
    }

    #[test]
    fn otsu_separates_bimodal() {
        let t = otsu_threshold(&[0.1, 0.1, 0.1, 0.9, 0.9]).unwrap();
        assert!(t > 0.1 && t < 0.9);
        assert!(matches!(otsu_threshold(&[0.3, 0.3]), Err(KnError::Degenerate(_))));
        assert!(otsu_threshold(&[0.3]).is_err());
    }

    #[test]
    fn classify_boundary() {
        let v = vec![("a".to_string(), Some(1.0)), ("b".into(), Some(0.0)), ("c".into(), Some(0.1)), ("d".into(), None)];
        let c: Vec<Class> = classify(&v, 0.1).unwrap().into_iter().map(|(_, c)| c).collect();
        assert_eq!(c, vec![Class::Consistent, Class::Inconsistent, Class::Inconsistent, Class::Undefined]);
        assert!(classify(&v, 1.5).is_err());
    }

    #[test]
    fn welch_hand_values() {
        let r = welch_t_test(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t - 2.0 / (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.t - 1.549).abs() < 1e-3);
        // df = (5/3)^2 / ((4/3)^2/2 + (1/3)^2/2) = 50/17
        assert!((r.df - 50.0 / 17.0).abs() < 1e-12);
        let same = welch_t_test(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn t_distribution_tabulated_values() {
        // Two-sided critical values: t_{0.975, df}.
        for (t, df) in [(12.706_204_736, 1.0), (2.570_581_836, 5.0), (2.228_138_852, 10.0), (1.959_987_708, 1e5)] {
            assert!((student_t_two_sided(t, df) - 0.05).abs() < 1e-8, "df {df}");
        }
        // df = 1 is Cauchy: p = 1 - 2 atan(t) / pi.
        let p = student_t_two_sided(1.0, 1.0);
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aggregate_u_i() {
        let mk = |id: &str, sets: Vec<Vec<usize>>| {
            FactConsistency::new(
                id,
                "P1",
                sets.into_iter().map(|v| v.into_iter().map(|p| NeuronId::new(0, p)).collect()).collect(),
            )
            .unwrap()
        };
        let mut one = BTreeMap::new();
        one.insert(Method::Ig, vec![mk("a", vec![vec![1], vec![2]]), mk("b", vec![vec![3], vec![4]])]);
        let r = aggregate(&mut one, ThresholdKind::Static, 0.1).unwrap();
        assert_eq!((r[0].r_i, r[0].u_i), (1.0, Some(1.0)));
        assert!(u_i_csv(&r).is_none());

        let mut three = BTreeMap::new();
        let consistent = vec![vec![1], vec![1]];
        let split = vec![vec![1], vec![2]];
        three.insert(Method::Ig, vec![mk("a", split.clone()), mk("b", consistent.clone()), mk("c", consistent.clone())]);
        three.insert(Method::Sig, vec![mk("a", consistent.clone()), mk("b", split.clone()), mk("c", consistent.clone())]);
        three.insert(Method::Amig, vec![mk("a", consistent.clone()), mk("b", consistent.clone()), mk("c", split)]);
        let r = aggregate(&mut three, ThresholdKind::Static, 0.1).unwrap();
        assert!(r.iter().all(|x| x.u_i == Some(0.0)));
        assert!((r[0].r_c + r[0].r_i - 1.0).abs() < 1e-9);
        assert!(u_i_csv(&r).unwrap().starts_with(U_I_HEADER));

        let mut mismatched = BTreeMap::new();
        mismatched.insert(Method::Ig, vec![mk("a", consistent.clone())]);
        mismatched.insert(Method::Sig, vec![mk("z", consistent)]);
        assert!(aggregate(&mut mismatched, ThresholdKind::Static, 0.1).is_err());
    }

    #[test]
    fn sweep_defaults_and_bounds() {
        let c = threshold_sweep(&[0.9, 0.95], SWEEP_LO, SWEEP_HI, SWEEP_STEP).unwrap();
        assert_eq!(c.len(), 39);
        assert!((c[38].0 - 0.80).abs() < 1e-12);
        assert!(c.iter().all(|&(_, f)| f == 0.0));
        assert!(threshold_sweep(&[], 0.0, 1.0, 0.1).is_err());
        assert!(threshold_sweep(&[0.1], 1.0, 0.0, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn relaxed_dominates_and_permutation_invariant(
            sets in proptest::collection::vec(proptest::collection::btree_set(0u8..12, 0..6), 2..6),
        ) {
            let a = cs_scores(&sets).unwrap();
            prop_assert!(a.relaxed >= a.original);
            prop_assert!((0.0..=1.0).contains(&a.relaxed));
            let mut rev = sets.clone();
            rev.reverse();
            prop_assert_eq!(a, cs_scores(&rev).unwrap());
        }

        #[test]
        fn welch_is_antisymmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 2..12),
            b in proptest::collection::vec(-5.0f64..5.0, 2..12),
        ) {
            if let (Ok(x), Ok(y)) = (welch_t_test(&a, &b), welch_t_test(&b, &a)) {
                prop_assert_eq!(x.t, -y.t);
                prop_assert!((x.p - y.p).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&x.p));
            }
        }

        #[test]
        fn sweep_is_monotone(v in proptest::collection::vec(0.0f64..1.0, 1..40)) {
            let c = threshold_sweep(&v, SWEEP_LO, SWEEP_HI, SWEEP_STEP).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }
}
