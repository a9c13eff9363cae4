// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradients of the answer probability with respect to final-position MLP
//! activations.
//!
//! Every layer's final-position activation vector is treated as an independent
//! input. By causality the keys and values of the earlier positions do not
//! depend on those inputs, so a session computes them once and afterwards only
//! re-evaluates (and differentiates) the final row. Integrated-gradient style
//! path integrals therefore cost one row-forward and one row-backward per step.

use super::forward::{
    attention_row, dot, layer_norm, layer_norm_backward, linear, linear_backward, run, LayerKv,
    Logits,
};
use super::{Model, OverrideSpec, Scalar};
use crate::error::{KnError, Result};

/// Per-layer quantities of a final-row evaluation needed by the backward pass.
struct LayerTape<T> {
    ln1_xhat: Vec<T>,
    ln1_rstd: T,
    query: Vec<T>,
    key: Vec<T>,
    value: Vec<T>,
    /// `[head][column]` attention of the final row.
    probs: Vec<Vec<T>>,
}

struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    final_xhat: Vec<T>,
    final_rstd: T,
    probs: Vec<T>,
}

/// Cached prefix state for repeated probability/gradient evaluations of one
/// `(tokens, answer)` pair.
pub struct GradientSession<'m, T: Scalar> {
    model: &'m Model<T>,
    answer: u32,
    /// Keys/values of positions `0..len-1` for every layer.
    prefix_kv: Vec<LayerKv<T>>,
    final_embedding: Vec<T>,
    natural: Vec<Vec<T>>,
}

impl<'m, T: Scalar> GradientSession<'m, T> {
    pub fn new(model: &'m Model<T>, tokens: &[u32], answer: u32) -> Result<Self> {
        model.check_answer(answer)?;
        let out = run(model, tokens, &OverrideSpec::none(), None, Logits::Last)?;
        let last = tokens.len() - 1;
        let prefix_kv = out
            .kv
            .into_iter()
            .map(|mut kv| {
                kv.keys.truncate(last);
                kv.values.truncate(last);
                kv
            })
            .collect();
        let w = &model.weights;
        let final_embedding = w
            .token_embedding
            .row(tokens[last] as usize)
            .iter()
            .zip(w.position_embedding.row(last))
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            model,
            answer,
            prefix_kv,
            final_embedding,
            natural: out.trace.final_activations(),
        })
    }

    /// Final-position activations recorded without substitution, `[layer][d_ff]`.
    pub fn natural_activations(&self) -> &[Vec<T>] {
        &self.natural
    }

    /// Answer probability with the final-position activations set to `substitute`.
    pub fn probability(&self, substitute: &[Vec<T>]) -> Result<T> {
        self.check_substitute(substitute)?;
        let tape = self.forward_row(substitute);
        Ok(tape.probs[self.answer as usize])
    }

    /// Answer probability and `dP/d activation` (`[layer][d_ff]`) at `substitute`.
    pub fn gradients(&self, substitute: &[Vec<T>]) -> Result<(T, Vec<Vec<T>>)> {
        self.check_substitute(substitute)?;
        let tape = self.forward_row(substitute);
        let p = tape.probs[self.answer as usize];
        Ok((p, self.backward(&tape)))
    }

    fn check_substitute(&self, s: &[Vec<T>]) -> Result<()> {
        let c = &self.model.config;
        if s.len() != c.n_layers || s.iter().any(|r| r.len() != c.d_ff) {
            return Err(KnError::ShapeMismatch(format!(
                "activation substitute must be [{}, {}]",
                c.n_layers, c.d_ff
            )));
        }
        Ok(())
    }

    fn forward_row(&self, substitute: &[Vec<T>]) -> Tape<T> {
        let m = self.model;
        let c = &m.config;
        let d = c.d_model;
        let dh = c.head_dim();
        let eps = T::lit(c.layernorm_epsilon);
        let mut x = self.final_embedding.clone();
        let mut layers = Vec::with_capacity(c.n_layers);
        for (l, lw) in m.weights.layers.iter().enumerate() {
            let (h, ln1_xhat, ln1_rstd) = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias, eps);
            let qkv = linear(&h, &lw.attn_qkv, &lw.attn_qkv_bias);
            let query = qkv[..d].to_vec();
            let key = qkv[d..2 * d].to_vec();
            let value = qkv[2 * d..].to_vec();
            let kv = &self.prefix_kv[l];
            let mut keys: Vec<Vec<T>> = kv.keys.clone();
            keys.push(key.clone());
            let mut mixed = vec![T::zero(); d];
            let mut probs = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let pr = attention_row(&query, &keys, head, dh, None);
                let hs = head * dh;
                for (col, &a) in pr.iter().enumerate() {
                    let v = if col < kv.values.len() { &kv.values[col] } else { &value };
                    for j in hs..hs + dh {
                        mixed[j] += a * v[j];
                    }
                }
                probs.push(pr);
            }
            let out = linear(&mixed, &lw.attn_out, &lw.attn_out_bias);
            for (xv, ov) in x.iter_mut().zip(out) {
                *xv += ov;
            }
            let mlp = linear(&substitute[l], &lw.mlp_out, &lw.mlp_out_bias);
            for (xv, ov) in x.iter_mut().zip(mlp) {
                *xv += ov;
            }
            layers.push(LayerTape {
                ln1_xhat,
                ln1_rstd,
                query,
                key,
                value,
                probs,
            });
        }
        let w = &m.weights;
        let (hf, final_xhat, final_rstd) = layer_norm(&x, &w.final_ln_gain, &w.final_ln_bias, eps);
        let unembed = w.unembedding();
        let mut probs: Vec<T> = (0..c.vocab_size).map(|v| dot(unembed.row(v), &hf)).collect();
        super::forward::softmax(&mut probs);
        Tape {
            layers,
            final_xhat,
            final_rstd,
            probs,
        }
    }

    fn backward(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        let m = self.model;
        let c = &m.config;
        let w = &m.weights;
        let d = c.d_model;
        let dh = c.head_dim();
        let scale = T::one() / T::from_usize(dh).expect("fits").sqrt();
        let a = self.answer as usize;
        let pa = tape.probs[a];

        // dP_a/dlogit_v = P_a (1[v = a] - P_v)
        let unembed = w.unembedding();
        let mut g_hf = vec![T::zero(); d];
        for (v, &pv) in tape.probs.iter().enumerate() {
            let indicator = if v == a { T::one() } else { T::zero() };
            let gl = pa * (indicator - pv);
            if gl == T::zero() {
                continue;
            }
            for (g, &u) in g_hf.iter_mut().zip(unembed.row(v)) {
                *g += gl * u;
            }
        }
        let mut g_x = layer_norm_backward(&g_hf, &tape.final_xhat, tape.final_rstd, &w.final_ln_gain);

        let mut grads = vec![Vec::new(); c.n_layers];
        for l in (0..c.n_layers).rev() {
            let lw = &w.layers[l];
            let lt = &tape.layers[l];
            let kv = &self.prefix_kv[l];
            grads[l] = linear_backward(&g_x, &lw.mlp_out);

            let g_mixed = linear_backward(&g_x, &lw.attn_out);
            let mut g_q = vec![T::zero(); d];
            let mut g_k = vec![T::zero(); d];
            let mut g_v = vec![T::zero(); d];
            let last = kv.keys.len();
            for head in 0..c.n_heads {
                let hs = head * dh;
                let go = &g_mixed[hs..hs + dh];
                let pr = &lt.probs[head];
                let g_a: Vec<T> = (0..=last)
                    .map(|col| {
                        let v = if col < last { &kv.values[col] } else { &lt.value };
                        dot(go, &v[hs..hs + dh])
                    })
                    .collect();
                let weighted: T = pr.iter().zip(&g_a).map(|(&p, &g)| p * g).sum();
                for (j, &gov) in go.iter().enumerate() {
                    g_v[hs + j] = pr[last] * gov;
                }
                for col in 0..=last {
                    let g_s = pr[col] * (g_a[col] - weighted) * scale;
                    let k = if col < last { &kv.keys[col] } else { &lt.key };
                    for j in hs..hs + dh {
                        g_q[j] += g_s * k[j];
                    }
                    if col == last {
                        for j in hs..hs + dh {
                            g_k[j] = g_s * lt.query[j];
                        }
                    }
                }
            }
            let mut g_qkv = g_q;
            g_qkv.extend(g_k);
            g_qkv.extend(g_v);
            let g_h = linear_backward(&g_qkv, &lw.attn_qkv);
            let g_ln = layer_norm_backward(&g_h, &lt.ln1_xhat, lt.ln1_rstd, &lw.ln1_gain);
            for (gx, gl) in g_x.iter_mut().zip(g_ln) {
                *gx += gl;
            }
        }
        grads
    }
}

impl<T: Scalar> Model<T> {
    /// `dP(answer)/d activation` at the final position for every `(layer, neuron)`.
    ///
    /// When `substitute` is given it replaces the final-position activations
    /// of every layer before differentiating.
    pub fn neuron_gradients(
        &self,
        tokens: &[u32],
        answer: u32,
        substitute: Option<&[Vec<T>]>,
    ) -> Result<Vec<Vec<T>>> {
        let session = GradientSession::new(self, tokens, answer)?;
        let point = match substitute {
            Some(s) => s.to_vec(),
            None => session.natural_activations().to_vec(),
        };
        Ok(session.gradients(&point)?.1)
    }
}
