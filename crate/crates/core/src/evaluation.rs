// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cloze scoring, perplexity and the post-edit metrics (reliability,
//! generalization, locality, their average, and relative perplexity change).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editing::EditMode;
use crate::error::{KnError, Result};
use crate::model::{log_softmax_at, Model, OverrideSpec, Scalar};

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Whether the model's top next-token prediction after `query` is `answer`.
pub fn cloze_correct<T: Scalar>(model: &Model<T>, query: &[u32], answer: u32) -> Result<bool> {
    model.check_answer(answer)?;
    Ok(predict(model, query)? == answer)
}

/// Top next-token prediction after `query`.
pub fn predict<T: Scalar>(model: &Model<T>, query: &[u32]) -> Result<u32> {
    let logits = model.final_logits(query, &OverrideSpec::none())?;
    Ok(u32::try_from(argmax(&logits)).expect("vocab fits u32"))
}

/// Sum of `-ln p(token_i | tokens_<i)` and number of predicted tokens.
///
/// Sequences longer than the context window are scored with overlapping
/// windows advancing by half a window, each token predicted exactly once.
pub fn negative_log_likelihood<T: Scalar>(model: &Model<T>, tokens: &[u32]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(KnError::InvalidInput(format!(
            "perplexity needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let window = model.config.max_positions;
    let stride = (window / 2).max(1);
    let mut nll = 0.0;
    let mut count = 0;
    let mut next = 1; // first position not yet predicted
    let mut end = tokens.len().min(window);
    loop {
        let start = end.saturating_sub(window);
        let trace = model.forward(&tokens[start..end], &OverrideSpec::none())?;
        for pos in next..end {
            let logits = trace.logits.row(pos - start - 1);
            nll -= log_softmax_at(logits, tokens[pos] as usize).as_f64();
            count += 1;
        }
        next = end;
        if end == tokens.len() {
            break;
        }
        end = (end + stride).min(tokens.len());
    }
    Ok((nll, count))
}

/// `exp` of the mean negative log-likelihood of tokens `2..n` given their prefixes.
pub fn perplexity<T: Scalar>(model: &Model<T>, tokens: &[u32]) -> Result<f64> {
    let (nll, n) = negative_log_likelihood(model, tokens)?;
    Ok((nll / n as f64).exp())
}

fn relative_change(before: f64, after: f64) -> f64 {
    (after - before) / before
}

/// Seeded choice of `samples` distinct indices out of `len`, in ascending order.
pub fn sample_indices(len: usize, samples: usize, seed: u64) -> Result<Vec<usize>> {
    if samples == 0 || len == 0 {
        return Err(KnError::InvalidInput("perplexity sampling needs texts and samples >= 1".into()));
    }
    if samples > len {
        return Err(KnError::InvalidInput(format!(
            "cannot sample {samples} texts from {len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, samples).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Mean relative perplexity change `(PPL_post - PPL_pre) / PPL_pre` over
/// `samples` texts drawn with `seed`.
pub fn delta_ppl<T: Scalar>(
    pre: &Model<T>,
    post: &Model<T>,
    texts: &[Vec<u32>],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let idx = sample_indices(texts.len(), samples, seed)?;
    let mut total = 0.0;
    for &i in &idx {
        total += relative_change(perplexity(pre, &texts[i])?, perplexity(post, &texts[i])?);
    }
    Ok(total / idx.len() as f64)
}

// ---------------------------------------------------------------------------
// Edit metrics
// ---------------------------------------------------------------------------

/// Scores of one edit. In erase mode `rel` and `gen` hold `1 - accuracy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditEvaluation {
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub avg: f64,
    pub delta_ppl: f64,
    pub mode: EditMode,
}

/// Pre-edit behaviour needed to score locality and perplexity change without
/// keeping a copy of the unedited weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PreEditBaseline {
    pub unrelated_predictions: Vec<u32>,
    pub ppl: Vec<f64>,
}

impl PreEditBaseline {
    pub fn capture<T: Scalar>(pre: &Model<T>, unrelated: &[Vec<u32>], ppl_texts: &[Vec<u32>]) -> Result<Self> {
        Ok(Self {
            unrelated_predictions: unrelated
                .iter()
                .map(|q| predict(pre, q))
                .collect::<Result<_>>()?,
            ppl: ppl_texts
                .iter()
                .map(|t| perplexity(pre, t))
                .collect::<Result<_>>()?,
        })
    }
}

/// Inputs of one edit evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EditProbe<'a> {
    /// Token ids of every neighbor query of the fact.
    pub neighbors: &'a [Vec<u32>],
    /// Index of the edited query within `neighbors`.
    pub edited: usize,
    /// Unrelated queries scored for locality.
    pub unrelated: &'a [Vec<u32>],
    /// Texts scored for the perplexity change (may be empty: change reported as 0).
    pub ppl_texts: &'a [Vec<u32>],
    pub mode: EditMode,
    /// Original object for erase, new object for update.
    pub target: u32,
}

/// Scores `post` against a captured pre-edit baseline.
pub fn edit_metrics_with_baseline<T: Scalar>(
    baseline: &PreEditBaseline,
    post: &Model<T>,
    probe: &EditProbe<'_>,
) -> Result<EditEvaluation> {
    if probe.neighbors.len() < 2 {
        return Err(KnError::InvalidInput("edit evaluation needs at least 2 neighbor queries".into()));
    }
    if probe.edited >= probe.neighbors.len() {
        return Err(KnError::OutOfRange(format!(
            "edited query {} of {}",
            probe.edited,
            probe.neighbors.len()
        )));
    }
    if probe.unrelated.is_empty() {
        return Err(KnError::InvalidInput("edit evaluation needs unrelated queries".into()));
    }
    if baseline.unrelated_predictions.len() != probe.unrelated.len()
        || baseline.ppl.len() != probe.ppl_texts.len()
    {
        return Err(KnError::ShapeMismatch("baseline was captured for other probes".into()));
    }
    let rel_raw = f64::from(u8::from(cloze_correct(post, &probe.neighbors[probe.edited], probe.target)?));
    let mut gen_hits = 0usize;
    for (i, q) in probe.neighbors.iter().enumerate() {
        if i != probe.edited && cloze_correct(post, q, probe.target)? {
            gen_hits += 1;
        }
    }
    let gen_raw = gen_hits as f64 / (probe.neighbors.len() - 1) as f64;
    let mut kept = 0usize;
    for (q, &before) in probe.unrelated.iter().zip(&baseline.unrelated_predictions) {
        if predict(post, q)? == before {
            kept += 1;
        }
    }
    let loc = kept as f64 / probe.unrelated.len() as f64;
    let (rel, gen) = match probe.mode {
        EditMode::Erase => (1.0 - rel_raw, 1.0 - gen_raw),
        EditMode::Update => (rel_raw, gen_raw),
    };
    let delta_ppl = if probe.ppl_texts.is_empty() {
        0.0
    } else {
        let mut total = 0.0;
        for (t, &before) in probe.ppl_texts.iter().zip(&baseline.ppl) {
            total += relative_change(before, perplexity(post, t)?);
        }
        total / probe.ppl_texts.len() as f64
    };
    Ok(EditEvaluation {
        rel,
        gen,
        loc,
        avg: (rel + gen + loc) / 3.0,
        delta_ppl,
        mode: probe.mode,
    })
}

/// Scores an edit given both the pre-edit and post-edit models.
pub fn edit_metrics<T: Scalar>(pre: &Model<T>, post: &Model<T>, probe: &EditProbe<'_>) -> Result<EditEvaluation> {
    let baseline = PreEditBaseline::capture(pre, probe.unrelated, probe.ppl_texts)?;
    edit_metrics_with_baseline(&baseline, post, probe)
}

/// Mean and population standard deviation of each metric over several runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: [f64; 5],
    pub std: [f64; 5],
    pub runs: usize,
}

impl MetricSummary {
    pub const COLUMNS: [&'static str; 5] = ["rel", "gen", "loc", "avg", "delta_ppl"];

    pub fn from_evaluations(evals: &[EditEvaluation]) -> Option<Self> {
        if evals.is_empty() {
            return None;
        }
        let n = evals.len() as f64;
        let rows: Vec<[f64; 5]> = evals
            .iter()
            .map(|e| [e.rel, e.gen, e.loc, e.avg, e.delta_ppl])
            .collect();
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for j in 0..5 {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            std[j] = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
        }
        Some(Self {
            mean,
            std,
            runs: evals.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::toy_model;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0f32, 2.0, 2.0, 1.0]), 1);
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = toy_model(1);
        m.weights.token_embedding.data.iter_mut().for_each(|v| *v = 0.0);
        let ppl = perplexity(&m, &[1, 2, 3, 4, 5]).unwrap();
        assert!((ppl - 100.0).abs() < 1e-3);
        assert_eq!(predict(&m, &[1, 2]).unwrap(), 0);
        assert!(cloze_correct(&m, &[1, 2], 0).unwrap());
    }

    #[test]
    fn perplexity_needs_two_tokens() {
        assert!(perplexity(&toy_model(1), &[3]).is_err());
    }

    #[test]
    fn perplexity_is_partition_invariant() {
        let m = toy_model(5).cast::<f64>();
        let tokens: Vec<u32> = (0..20).map(|i| (i * 7 % 99) as u32).collect();
        let (nll, n) = negative_log_likelihood(&m, &tokens).unwrap();
        let mut acc = 0.0;
        for end in 2..=tokens.len() {
            let logits = m.final_logits(&tokens[..end - 1], &OverrideSpec::none()).unwrap();
            acc -= log_softmax_at(&logits, tokens[end - 1] as usize);
        }
        assert_eq!(n, 19);
        assert!((nll - acc).abs() < 1e-9);
    }

    #[test]
    fn long_texts_are_windowed() {
        let m = toy_model(5);
        let tokens: Vec<u32> = (0..150).map(|i| (i * 13 % 99) as u32).collect();
        let (_, n) = negative_log_likelihood(&m, &tokens).unwrap();
        assert_eq!(n, 149);
        assert!(perplexity(&m, &tokens).unwrap() >= 1.0);
    }

    #[test]
    fn unchanged_model_has_zero_delta_ppl_and_full_locality() {
        let m = toy_model(9);
        let texts = vec![vec![1, 2, 3, 4], vec![5, 6, 7], vec![8, 9, 10, 11, 12]];
        assert_eq!(delta_ppl(&m, &m, &texts, 2, 7).unwrap(), 0.0);
        let neighbors = vec![vec![1, 2], vec![3, 4], vec![5, 6]];
        let unrelated = vec![vec![7, 8], vec![9, 10]];
        let target = predict(&m, &neighbors[0]).unwrap();
        let probe = EditProbe {
            neighbors: &neighbors,
            edited: 0,
            unrelated: &unrelated,
            ppl_texts: &texts,
            mode: EditMode::Erase,
            target,
        };
        let e = edit_metrics(&m, &m, &probe).unwrap();
        assert_eq!(e.loc, 1.0);
        assert_eq!(e.rel, 0.0);
        assert_eq!(e.delta_ppl, 0.0);
        assert!((e.avg - (e.rel + e.gen + e.loc) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn delta_ppl_formula() {
        assert_eq!(relative_change(10.0, 15.0), 0.5);
        assert!(sample_indices(3, 4, 1).is_err());
        assert_eq!(sample_indices(5, 3, 11).unwrap(), sample_indices(5, 3, 11).unwrap());
    }

    #[test]
    fn summary_statistics() {
        let e = |v: f64| EditEvaluation {
            rel: v,
            gen: v,
            loc: 1.0,
            avg: (2.0 * v + 1.0) / 3.0,
            delta_ppl: 0.0,
            mode: EditMode::Erase,
        };
        let s = MetricSummary::from_evaluations(&[e(0.0), e(1.0)]).unwrap();
        assert_eq!(s.mean[0], 0.5);
        assert_eq!(s.std[0], 0.5);
        assert_eq!(s.std[2], 0.0);
        assert!(MetricSummary::from_evaluations(&[]).is_none());
    }
}
