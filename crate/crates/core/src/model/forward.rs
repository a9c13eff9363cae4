// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal forward pass with activation/attention recording and overrides.

use serde::{Deserialize, Serialize};

use super::{InterventionMode, LayerWeights, Model, NeuronId, Scalar, SynapseId, Tensor};
use crate::error::{KnError, Result};

/// Additive pre-softmax bias realizing a zero attention factor.
pub const ATTENTION_MASK_BIAS: f64 = -1e9;

// ---------------------------------------------------------------------------
// Overrides
// ---------------------------------------------------------------------------

/// Interventions applied inside one forward pass.
///
/// Neuron overrides scale the MLP activation of the neuron at every position.
/// Synapse overrides scale the unnormalized attention weight `exp(logit)` of a
/// column, i.e. add `ln(factor)` to its pre-softmax logit (a factor of zero
/// becomes [`ATTENTION_MASK_BIAS`]), so every row stays a distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideSpec {
    pub neuron_overrides: Vec<(NeuronId, InterventionMode)>,
    pub synapse_overrides: Vec<(SynapseId, InterventionMode)>,
    pub suppress_factor: f64,
    pub enhance_factor: f64,
}

impl Default for OverrideSpec {
    fn default() -> Self {
        Self {
            neuron_overrides: Vec::new(),
            synapse_overrides: Vec::new(),
            suppress_factor: 0.0,
            enhance_factor: 2.0,
        }
    }
}

impl OverrideSpec {
    /// Override set touching nothing.
    pub fn none() -> Self {
        Self::default()
    }

    /// Applies `mode` to every neuron in `neurons`.
    pub fn neurons<'a>(
        neurons: impl IntoIterator<Item = &'a NeuronId>,
        mode: InterventionMode,
    ) -> Self {
        Self {
            neuron_overrides: neurons.into_iter().map(|n| (*n, mode)).collect(),
            ..Self::default()
        }
    }

    /// Applies `mode` to every attention column in `synapses`.
    pub fn synapses<'a>(
        synapses: impl IntoIterator<Item = &'a SynapseId>,
        mode: InterventionMode,
    ) -> Self {
        Self {
            synapse_overrides: synapses.into_iter().map(|s| (*s, mode)).collect(),
            ..Self::default()
        }
    }

    pub fn with_factors(mut self, suppress: f64, enhance: f64) -> Self {
        self.suppress_factor = suppress;
        self.enhance_factor = enhance;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.neuron_overrides.is_empty() && self.synapse_overrides.is_empty()
    }

    pub fn factor(&self, mode: InterventionMode) -> f64 {
        match mode {
            InterventionMode::Suppress => self.suppress_factor,
            InterventionMode::Enhance => self.enhance_factor,
        }
    }

    fn validate<T: Scalar>(&self, model: &Model<T>, seq_len: usize) -> Result<()> {
        for f in [self.suppress_factor, self.enhance_factor] {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(KnError::InvalidInput(format!("override factor {f} must be >= 0")));
            }
        }
        let c = &model.config;
        for (n, _) in &self.neuron_overrides {
            n.check(c)?;
        }
        for (s, _) in &self.synapse_overrides {
            if s.layer >= c.n_layers || s.head >= c.n_heads || s.column >= seq_len {
                return Err(KnError::OutOfRange(format!(
                    "synapse (column {}, layer {}, head {}) outside [{seq_len}, {}, {}]",
                    s.column, s.layer, s.head, c.n_layers, c.n_heads
                )));
            }
        }
        Ok(())
    }

    /// Per-layer `(neuron, factor)` lists.
    fn neuron_factors(&self, n_layers: usize) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); n_layers];
        for (n, mode) in &self.neuron_overrides {
            out[n.layer].push((n.position, self.factor(*mode)));
        }
        out
    }

    /// Per-layer `[head][column]` additive logit biases.
    fn synapse_biases(&self, n_layers: usize, n_heads: usize, seq_len: usize) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; n_layers];
        for (s, mode) in &self.synapse_overrides {
            let f = self.factor(*mode);
            let bias = if f == 0.0 { ATTENTION_MASK_BIAS } else { f.ln() };
            let layer = out[s.layer].get_or_insert_with(|| vec![0.0; n_heads * seq_len]);
            layer[s.head * seq_len + s.column] = bias;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Everything recorded by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T = f32> {
    /// Post-GELU MLP activations, `[layer, position, d_ff]`.
    pub mlp_activations: Tensor<T>,
    /// Post-softmax attention, `[layer, head, row, column]`; masked entries are zero.
    pub attention_scores: Tensor<T>,
    /// Output logits, `[position, vocab]`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.logits.shape[0]
    }

    pub fn n_layers(&self) -> usize {
        self.mlp_activations.shape[0]
    }

    pub fn n_heads(&self) -> usize {
        self.attention_scores.shape[1]
    }

    pub fn d_ff(&self) -> usize {
        self.mlp_activations.shape[2]
    }

    pub fn activation(&self, layer: usize, position: usize, neuron: usize) -> T {
        let s = &self.mlp_activations.shape;
        self.mlp_activations.data[(layer * s[1] + position) * s[2] + neuron]
    }

    pub fn attention(&self, layer: usize, head: usize, row: usize, column: usize) -> T {
        let s = &self.attention_scores.shape;
        self.attention_scores.data[((layer * s[1] + head) * s[2] + row) * s[3] + column]
    }

    /// MLP activations at the final position, `[layer][d_ff]`.
    pub fn final_activations(&self) -> Vec<Vec<T>> {
        let last = self.seq_len() - 1;
        (0..self.n_layers())
            .map(|l| (0..self.d_ff()).map(|p| self.activation(l, last, p)).collect())
            .collect()
    }

    pub fn final_logits(&self) -> &[T] {
        self.logits.row(self.seq_len() - 1)
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `x @ w + bias` for a single row, with `w` stored `[in, out]`.
pub(crate) fn linear<T: Scalar>(x: &[T], w: &Tensor<T>, bias: &Tensor<T>) -> Vec<T> {
    let n_out = w.shape[1];
    let mut out = bias.data.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        let row = &w.data[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

/// `w @ g` for `w` stored `[in, out]`: maps an output-side gradient back to the input side.
pub(crate) fn linear_backward<T: Scalar>(g: &[T], w: &Tensor<T>) -> Vec<T> {
    let n_out = w.shape[1];
    (0..w.shape[0])
        .map(|i| {
            w.data[i * n_out..(i + 1) * n_out]
                .iter()
                .zip(g)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect()
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Layer normalization; returns the output, the normalized input and `1/sigma`.
pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> (Vec<T>, Vec<T>, T) {
    let n = T::from_usize(x.len()).expect("length fits");
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * rstd).collect();
    let y = xhat
        .iter()
        .zip(&gain.data)
        .zip(&bias.data)
        .map(|((&h, &g), &b)| h * g + b)
        .collect();
    (y, xhat, rstd)
}

/// Gradient of layer normalization with respect to its input.
pub(crate) fn layer_norm_backward<T: Scalar>(gy: &[T], xhat: &[T], rstd: T, gain: &Tensor<T>) -> Vec<T> {
    let n = T::from_usize(gy.len()).expect("length fits");
    let gxhat: Vec<T> = gy.iter().zip(&gain.data).map(|(&g, &w)| g * w).collect();
    let mean_g = gxhat.iter().copied().sum::<T>() / n;
    let mean_gx = gxhat.iter().zip(xhat).map(|(&g, &h)| g * h).sum::<T>() / n;
    gxhat
        .iter()
        .zip(xhat)
        .map(|(&g, &h)| rstd * (g - mean_g - h * mean_gx))
        .collect()
}

pub(crate) fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(0.044_715) * x * x * x)).tanh())
}

/// In-place numerically stable softmax.
pub(crate) fn softmax<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-softmax value at `index`.
pub fn log_softmax_at<T: Scalar>(logits: &[T], index: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    logits[index] - lse
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Keys and values of one layer, `[position][d_model]`.
pub(crate) struct LayerKv<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
}

pub(crate) struct RunOutput<T> {
    pub trace: ActivationTrace<T>,
    pub kv: Vec<LayerKv<T>>,
}

/// Which rows of the logits to compute.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Logits {
    All,
    Last,
}

pub(crate) fn attention_row<T: Scalar>(
    q: &[T],
    keys: &[Vec<T>],
    head: usize,
    head_dim: usize,
    bias: Option<&[f64]>,
) -> Vec<T> {
    let scale = T::one() / T::from_usize(head_dim).expect("fits").sqrt();
    let hs = head * head_dim;
    let mut row: Vec<T> = keys
        .iter()
        .enumerate()
        .map(|(c, k)| {
            let s = dot(&q[hs..hs + head_dim], &k[hs..hs + head_dim]) * scale;
            match bias {
                Some(b) => s + T::lit(b[c]),
                None => s,
            }
        })
        .collect();
    softmax(&mut row);
    row
}

fn apply_attention_layer<T: Scalar>(
    model: &Model<T>,
    lw: &LayerWeights<T>,
    x: &mut [Vec<T>],
    bias: Option<&[f64]>,
    attn_out: &mut [T],
) -> LayerKv<T> {
    let c = &model.config;
    let d = c.d_model;
    let dh = c.head_dim();
    let t = x.len();
    let eps = T::lit(c.layernorm_epsilon);
    let mut queries = Vec::with_capacity(t);
    let mut keys = Vec::with_capacity(t);
    let mut values = Vec::with_capacity(t);
    for row in x.iter() {
        let (h, _, _) = layer_norm(row, &lw.ln1_gain, &lw.ln1_bias, eps);
        let qkv = linear(&h, &lw.attn_qkv, &lw.attn_qkv_bias);
        queries.push(qkv[..d].to_vec());
        keys.push(qkv[d..2 * d].to_vec());
        values.push(qkv[2 * d..].to_vec());
    }
    for r in 0..t {
        let mut mixed = vec![T::zero(); d];
        for head in 0..c.n_heads {
            let hb = bias.map(|b| &b[head * t..head * t + r + 1]);
            let probs = attention_row(&queries[r], &keys[..=r], head, dh, hb);
            let hs = head * dh;
            for (col, &a) in probs.iter().enumerate() {
                for j in hs..hs + dh {
                    mixed[j] += a * values[col][j];
                }
                attn_out[(head * t + r) * t + col] = a;
            }
        }
        let out = linear(&mixed, &lw.attn_out, &lw.attn_out_bias);
        for (xv, ov) in x[r].iter_mut().zip(out) {
            *xv += ov;
        }
    }
    LayerKv { keys, values }
}

pub(crate) fn run<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    overrides: &OverrideSpec,
    substitute: Option<&[Vec<T>]>,
    logits_rows: Logits,
) -> Result<RunOutput<T>> {
    model.check_tokens(tokens)?;
    overrides.validate(model, tokens.len())?;
    let c = &model.config;
    if let Some(s) = substitute {
        if s.len() != c.n_layers || s.iter().any(|r| r.len() != c.d_ff) {
            return Err(KnError::ShapeMismatch(format!(
                "activation substitute must be [{}, {}]",
                c.n_layers, c.d_ff
            )));
        }
    }
    let t = tokens.len();
    let w = &model.weights;
    let eps = T::lit(c.layernorm_epsilon);
    let neuron_factors = overrides.neuron_factors(c.n_layers);
    let synapse_biases = overrides.synapse_biases(c.n_layers, c.n_heads, t);

    let mut x: Vec<Vec<T>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| {
            w.token_embedding
                .row(tok as usize)
                .iter()
                .zip(w.position_embedding.row(pos))
                .map(|(&a, &b)| a + b)
                .collect()
        })
        .collect();

    let mut acts = Tensor::zeros(&[c.n_layers, t, c.d_ff]);
    let mut attn = Tensor::zeros(&[c.n_layers, c.n_heads, t, t]);
    let mut kv = Vec::with_capacity(c.n_layers);
    let attn_stride = c.n_heads * t * t;
    let act_stride = t * c.d_ff;

    for (l, lw) in w.layers.iter().enumerate() {
        let layer_attn = &mut attn.data[l * attn_stride..(l + 1) * attn_stride];
        kv.push(apply_attention_layer(
            model,
            lw,
            &mut x,
            synapse_biases[l].as_deref(),
            layer_attn,
        ));
        for (pos, row) in x.iter_mut().enumerate() {
            let (h, _, _) = layer_norm(row, &lw.ln2_gain, &lw.ln2_bias, eps);
            let mut a: Vec<T> = linear(&h, &lw.mlp_in, &lw.mlp_in_bias)
                .into_iter()
                .map(gelu_tanh)
                .collect();
            for &(p, f) in &neuron_factors[l] {
                a[p] *= T::lit(f);
            }
            if pos == t - 1 {
                if let Some(s) = substitute {
                    a.copy_from_slice(&s[l]);
                }
            }
            let base = l * act_stride + pos * c.d_ff;
            acts.data[base..base + c.d_ff].copy_from_slice(&a);
            let out = linear(&a, &lw.mlp_out, &lw.mlp_out_bias);
            for (xv, ov) in row.iter_mut().zip(out) {
                *xv += ov;
            }
        }
    }

    let unembed = w.unembedding();
    let first = match logits_rows {
        Logits::All => 0,
        Logits::Last => t - 1,
    };
    let mut logits = Tensor::zeros(&[t, c.vocab_size]);
    for pos in first..t {
        let (h, _, _) = layer_norm(&x[pos], &w.final_ln_gain, &w.final_ln_bias, eps);
        let out = logits.row_mut(pos);
        for (v, o) in out.iter_mut().enumerate() {
            *o = dot(unembed.row(v), &h);
        }
    }

    Ok(RunOutput {
        trace: ActivationTrace {
            mlp_activations: acts,
            attention_scores: attn,
            logits,
        },
        kv,
    })
}

impl<T: Scalar> Model<T> {
    /// Runs the model over `tokens`, applying `overrides`, and records the trace.
    pub fn forward(&self, tokens: &[u32], overrides: &OverrideSpec) -> Result<ActivationTrace<T>> {
        Ok(run(self, tokens, overrides, None, Logits::All)?.trace)
    }

    /// Like [`Model::forward`], but the final-position MLP activations of every
    /// layer are replaced by `substitute` (`[layer][d_ff]`).
    pub fn forward_with_substitute(
        &self,
        tokens: &[u32],
        overrides: &OverrideSpec,
        substitute: &[Vec<T>],
    ) -> Result<ActivationTrace<T>> {
        Ok(run(self, tokens, overrides, Some(substitute), Logits::All)?.trace)
    }

    /// Final-position MLP activations `[layer][d_ff]` for `tokens`.
    pub fn final_activations(&self, tokens: &[u32], overrides: &OverrideSpec) -> Result<Vec<Vec<T>>> {
        Ok(run(self, tokens, overrides, None, Logits::Last)?
            .trace
            .final_activations())
    }

    /// Final-position next-token logits.
    pub fn final_logits(&self, tokens: &[u32], overrides: &OverrideSpec) -> Result<Vec<T>> {
        let out = run(self, tokens, overrides, None, Logits::Last)?;
        Ok(out.trace.final_logits().to_vec())
    }

    /// Softmax probability of `answer` at the final position.
    pub fn answer_probability(&self, tokens: &[u32], answer: u32, overrides: &OverrideSpec) -> Result<f64> {
        self.check_answer(answer)?;
        let logits = self.final_logits(tokens, overrides)?;
        Ok(log_softmax_at(&logits, answer as usize).as_f64().exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::toy_model;

    #[test]
    fn attention_rows_are_distributions() {
        let m = toy_model(42);
        let tokens = [3, 17, 42, 8, 99, 5];
        let tr = m.forward(&tokens, &OverrideSpec::none()).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                for r in 0..tokens.len() {
                    let s: f32 = (0..tokens.len()).map(|c| tr.attention(l, h, r, c)).sum();
                    assert!((s - 1.0).abs() <= 1e-4);
                    for c in r + 1..tokens.len() {
                        assert_eq!(tr.attention(l, h, r, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn suppressing_a_neuron_zeroes_it_everywhere() {
        let m = toy_model(42);
        let tokens = [1, 2, 3, 4];
        let ov = OverrideSpec::neurons(&[NeuronId::new(0, 0)], InterventionMode::Suppress);
        let tr = m.forward(&tokens, &ov).unwrap();
        for pos in 0..4 {
            assert_eq!(tr.activation(0, pos, 0), 0.0);
        }
        let base = m.forward(&tokens, &OverrideSpec::none()).unwrap();
        // Only the listed coordinate changes in the first layer.
        for pos in 0..4 {
            for p in 1..64 {
                assert_eq!(tr.activation(0, pos, p), base.activation(0, pos, p));
            }
        }
    }

    #[test]
    fn synapse_override_keeps_rows_normalized() {
        let m = toy_model(42);
        let tokens = [10, 11, 12, 13, 14];
        for mode in [InterventionMode::Suppress, InterventionMode::Enhance] {
            let ov = OverrideSpec::synapses(
                &[SynapseId::new(0, 1, 2), SynapseId::new(3, 0, 0)],
                mode,
            );
            let tr = m.forward(&tokens, &ov).unwrap();
            for r in 0..5 {
                let s: f32 = (0..5).map(|c| tr.attention(1, 2, r, c)).sum();
                assert!((s - 1.0).abs() <= 1e-4);
            }
            if mode == InterventionMode::Suppress {
                assert!(tr.attention(1, 2, 4, 0) < 1e-6);
                // The only visible column of row 0 cannot be masked away.
                assert!((tr.attention(1, 2, 0, 0) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = toy_model(7);
        let ov = OverrideSpec::neurons(&[NeuronId::new(1, 5)], InterventionMode::Enhance);
        let a = m.forward(&[4, 5, 6], &ov).unwrap();
        let b = m.forward(&[4, 5, 6], &ov).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = toy_model(42);
        assert!(matches!(m.forward(&[], &OverrideSpec::none()), Err(KnError::InvalidInput(_))));
        assert!(matches!(m.forward(&[100], &OverrideSpec::none()), Err(KnError::OutOfRange(_))));
        let long = vec![1u32; 65];
        assert!(matches!(m.forward(&long, &OverrideSpec::none()), Err(KnError::InvalidInput(_))));
        let ov = OverrideSpec::synapses(&[SynapseId::new(3, 0, 0)], InterventionMode::Suppress);
        assert!(m.forward(&[1, 2], &ov).is_err());
    }

    #[test]
    fn substitute_replaces_only_the_final_position() {
        let m = toy_model(42);
        let tokens = [1, 2, 3];
        let base = m.forward(&tokens, &OverrideSpec::none()).unwrap();
        let sub = vec![vec![0.5f32; 64]; 2];
        let tr = m.forward_with_substitute(&tokens, &OverrideSpec::none(), &sub).unwrap();
        assert_eq!(tr.final_activations(), sub);
        for pos in 0..2 {
            for p in 0..64 {
                assert_eq!(tr.activation(1, pos, p), base.activation(1, pos, p));
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_answer_probability() {
        let mut m = toy_model(42);
        m.weights.token_embedding.data.iter_mut().for_each(|v| *v = 0.0);
        let p = m.answer_probability(&[1, 2, 3], 7, &OverrideSpec::none()).unwrap();
        assert!((p - 0.01).abs() < 1e-7);
    }
}
