// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-contained GPT-2-style transformer runtime.
//!
//! The runtime holds its weights in plain row-major buffers, runs a causal
//! forward pass that records MLP activations and attention patterns, and
//! differentiates the answer probability with respect to the final-position
//! MLP activations of every layer.
//!
//! Weights are stored in the orientation used by GPT-2's `Conv1D` modules:
//! a projection from `n_in` to `n_out` features is an `[n_in, n_out]` matrix,
//! so the value vector of MLP neuron `p` in layer `l` is row `p` of
//! `h.{l}.mlp.c_proj.weight`.

pub mod checkpoint;
mod forward;
pub mod golden;
mod grad;
pub mod tokenizer;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KnError, Result};

pub use checkpoint::{generate_toy_checkpoint, load_checkpoint, save_checkpoint};
pub use forward::{log_softmax_at, ActivationTrace, OverrideSpec, ATTENTION_MASK_BIAS};
pub use grad::GradientSession;
pub use tokenizer::BpeTables;

// ---------------------------------------------------------------------------
// Scalars
// ---------------------------------------------------------------------------

/// Floating-point type the runtime can evaluate in.
///
/// Checkpoints are always `f32`; `f64` is used for gradient checking.
pub trait Scalar:
    Float + FromPrimitive + Default + Sum + AddAssign + MulAssign + fmt::Debug + Send + Sync + 'static
{
    /// Widening or narrowing conversion from a stored `f32`.
    fn from_f32(v: f32) -> Self;
    /// Conversion to `f64` for statistics.
    fn as_f64(self) -> f64;
    /// Narrowing conversion used when writing checkpoints.
    fn as_f32(self) -> f32;
    /// Literal conversion.
    fn lit(v: f64) -> Self;
    /// Appends the little-endian bytes of the value.
    fn extend_le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn as_f32(self) -> f32 {
        self
    }
    #[allow(clippy::cast_possible_truncation)]
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn as_f64(self) -> f64 {
        self
    }
    #[allow(clippy::cast_possible_truncation)]
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn lit(v: f64) -> Self {
        v
    }
    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Nonlinearity of the MLP block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// GPT-2's tanh approximation of GELU.
    GeluTanh,
}

/// Architecture hyperparameters of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Width of the MLP intermediate layer (number of neurons per layer).
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub layernorm_epsilon: f64,
    pub activation_kind: ActivationKind,
}

impl ModelConfig {
    /// The seeded toy architecture used throughout the test suite.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            vocab_size: 100,
            max_positions: 64,
            layernorm_epsilon: 1e-5,
            activation_kind: ActivationKind::GeluTanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(KnError::InvalidInput(format!("config.{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(KnError::InvalidInput(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layernorm_epsilon > 0.0 && self.layernorm_epsilon.is_finite()) {
            return Err(KnError::InvalidInput("layernorm_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of MLP neurons, `n_layers * d_ff`.
    pub fn neuron_count(&self) -> usize {
        self.n_layers * self.d_ff
    }
}

// ---------------------------------------------------------------------------
// Identifiers
// ---------------------------------------------------------------------------

/// An intermediate MLP neuron: `position` indexes the `d_ff` axis of `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub position: usize,
}

impl NeuronId {
    pub fn new(layer: usize, position: usize) -> Self {
        Self { layer, position }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.position >= config.d_ff {
            return Err(KnError::OutOfRange(format!(
                "neuron ({}, {}) outside [{}, {}]",
                self.layer, self.position, config.n_layers, config.d_ff
            )));
        }
        Ok(())
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.N{}", self.layer, self.position)
    }
}

/// An attention column `column` of head `head` in layer `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SynapseId {
    pub column: usize,
    pub layer: usize,
    pub head: usize,
}

impl SynapseId {
    pub fn new(column: usize, layer: usize, head: usize) -> Self {
        Self {
            column,
            layer,
            head,
        }
    }
}

/// Direction of an activation or attention intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    Suppress,
    Enhance,
}

impl InterventionMode {
    /// Sign applied to relative changes so that an intervention that works as
    /// intended reports a positive number.
    pub fn sign(self) -> f64 {
        match self {
            Self::Suppress => -1.0,
            Self::Enhance => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Suppress => "suppress",
            Self::Enhance => "enhance",
        }
    }
}

// ---------------------------------------------------------------------------
// Tensors and weights
// ---------------------------------------------------------------------------

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KnError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// Fused query/key/value projection, `[d_model, 3 * d_model]`.
    pub attn_qkv: Tensor<T>,
    pub attn_qkv_bias: Tensor<T>,
    /// Attention output projection, `[d_model, d_model]`.
    pub attn_out: Tensor<T>,
    pub attn_out_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    /// MLP first projection, `[d_model, d_ff]`.
    pub mlp_in: Tensor<T>,
    pub mlp_in_bias: Tensor<T>,
    /// MLP second projection, `[d_ff, d_model]`; row `p` is neuron `p`'s value vector.
    pub mlp_out: Tensor<T>,
    pub mlp_out_bias: Tensor<T>,
}

/// All weights of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// Token embedding `[vocab_size, d_model]`.
    pub token_embedding: Tensor<T>,
    /// Learned absolute position embedding `[max_positions, d_model]`.
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_ln_gain: Tensor<T>,
    pub final_ln_bias: Tensor<T>,
    /// Separate unembedding `[vocab_size, d_model]`; tied to the token embedding when absent.
    pub unembedding: Option<Tensor<T>>,
}

/// Name and expected shape of every tensor a checkpoint with `config` holds.
pub fn tensor_layout(config: &ModelConfig, untied_head: bool) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![
        ("wte.weight".to_string(), vec![config.vocab_size, d]),
        ("wpe.weight".to_string(), vec![config.max_positions, d]),
    ];
    for l in 0..config.n_layers {
        let p = format!("h.{l}.");
        out.extend([
            (format!("{p}ln_1.weight"), vec![d]),
            (format!("{p}ln_1.bias"), vec![d]),
            (format!("{p}attn.c_attn.weight"), vec![d, 3 * d]),
            (format!("{p}attn.c_attn.bias"), vec![3 * d]),
            (format!("{p}attn.c_proj.weight"), vec![d, d]),
            (format!("{p}attn.c_proj.bias"), vec![d]),
            (format!("{p}ln_2.weight"), vec![d]),
            (format!("{p}ln_2.bias"), vec![d]),
            (format!("{p}mlp.c_fc.weight"), vec![d, config.d_ff]),
            (format!("{p}mlp.c_fc.bias"), vec![config.d_ff]),
            (format!("{p}mlp.c_proj.weight"), vec![config.d_ff, d]),
            (format!("{p}mlp.c_proj.bias"), vec![d]),
        ]);
    }
    out.push(("ln_f.weight".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    if untied_head {
        out.push(("lm_head.weight".to_string(), vec![config.vocab_size, d]));
    }
    out
}

impl<T: Scalar> Weights<T> {
    /// Every tensor paired with its checkpoint name, in layout order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("wte.weight".to_string(), &self.token_embedding),
            ("wpe.weight".to_string(), &self.position_embedding),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            let p = format!("h.{l}.");
            out.extend([
                (format!("{p}ln_1.weight"), &lw.ln1_gain),
                (format!("{p}ln_1.bias"), &lw.ln1_bias),
                (format!("{p}attn.c_attn.weight"), &lw.attn_qkv),
                (format!("{p}attn.c_attn.bias"), &lw.attn_qkv_bias),
                (format!("{p}attn.c_proj.weight"), &lw.attn_out),
                (format!("{p}attn.c_proj.bias"), &lw.attn_out_bias),
                (format!("{p}ln_2.weight"), &lw.ln2_gain),
                (format!("{p}ln_2.bias"), &lw.ln2_bias),
                (format!("{p}mlp.c_fc.weight"), &lw.mlp_in),
                (format!("{p}mlp.c_fc.bias"), &lw.mlp_in_bias),
                (format!("{p}mlp.c_proj.weight"), &lw.mlp_out),
                (format!("{p}mlp.c_proj.bias"), &lw.mlp_out_bias),
            ]);
        }
        out.push(("ln_f.weight".to_string(), &self.final_ln_gain));
        out.push(("ln_f.bias".to_string(), &self.final_ln_bias));
        if let Some(head) = &self.unembedding {
            out.push(("lm_head.weight".to_string(), head));
        }
        out
    }

    /// Assembles weights from named tensors, checking every shape against `config`.
    pub fn from_named(
        config: &ModelConfig,
        mut tensors: std::collections::BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let untied = tensors.contains_key("lm_head.weight");
        for (name, shape) in tensor_layout(config, untied) {
            match tensors.get(&name) {
                None => {
                    return Err(KnError::ShapeMismatch(format!("tensor {name} is missing")))
                }
                Some(t) if t.shape != shape => {
                    return Err(KnError::ShapeMismatch(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                Some(_) => {}
            }
        }
        let mut take = |name: String| tensors.remove(&name).expect("checked above");
        let token_embedding = take("wte.weight".into());
        let position_embedding = take("wpe.weight".into());
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("h.{l}.");
                LayerWeights {
                    ln1_gain: take(format!("{p}ln_1.weight")),
                    ln1_bias: take(format!("{p}ln_1.bias")),
                    attn_qkv: take(format!("{p}attn.c_attn.weight")),
                    attn_qkv_bias: take(format!("{p}attn.c_attn.bias")),
                    attn_out: take(format!("{p}attn.c_proj.weight")),
                    attn_out_bias: take(format!("{p}attn.c_proj.bias")),
                    ln2_gain: take(format!("{p}ln_2.weight")),
                    ln2_bias: take(format!("{p}ln_2.bias")),
                    mlp_in: take(format!("{p}mlp.c_fc.weight")),
                    mlp_in_bias: take(format!("{p}mlp.c_fc.bias")),
                    mlp_out: take(format!("{p}mlp.c_proj.weight")),
                    mlp_out_bias: take(format!("{p}mlp.c_proj.bias")),
                }
            })
            .collect();
        let final_ln_gain = take("ln_f.weight".into());
        let final_ln_bias = take("ln_f.bias".into());
        let unembedding = untied.then(|| take("lm_head.weight".into()));
        if let Some(extra) = tensors.keys().next() {
            return Err(KnError::ShapeMismatch(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain,
            final_ln_bias,
            unembedding,
        })
    }

    /// Output projection used to produce logits.
    pub fn unembedding(&self) -> &Tensor<T> {
        self.unembedding.as_ref().unwrap_or(&self.token_embedding)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A loaded checkpoint: config, weights and tokenizer tables.
///
/// A `Model` is immutable under forward and gradient evaluation and may be
/// shared across threads; edits take `&mut Model`.
#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    pub tokenizer: Arc<BpeTables>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, weights: Weights<T>, tokenizer: BpeTables) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_len() != config.vocab_size {
            return Err(KnError::ShapeMismatch(format!(
                "tokenizer has {} tokens, config declares {}",
                tokenizer.vocab_len(),
                config.vocab_size
            )));
        }
        // Round-trip through the named view re-checks every shape.
        let named = weights
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let weights = Weights::from_named(&config, named)?;
        Ok(Self {
            config,
            weights,
            tokenizer: Arc::new(tokenizer),
        })
    }

    /// Copy of the model evaluated in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let w = &self.weights;
        Model {
            config: self.config.clone(),
            weights: Weights {
                token_embedding: w.token_embedding.cast(),
                position_embedding: w.position_embedding.cast(),
                layers: w
                    .layers
                    .iter()
                    .map(|lw| LayerWeights {
                        ln1_gain: lw.ln1_gain.cast(),
                        ln1_bias: lw.ln1_bias.cast(),
                        attn_qkv: lw.attn_qkv.cast(),
                        attn_qkv_bias: lw.attn_qkv_bias.cast(),
                        attn_out: lw.attn_out.cast(),
                        attn_out_bias: lw.attn_out_bias.cast(),
                        ln2_gain: lw.ln2_gain.cast(),
                        ln2_bias: lw.ln2_bias.cast(),
                        mlp_in: lw.mlp_in.cast(),
                        mlp_in_bias: lw.mlp_in_bias.cast(),
                        mlp_out: lw.mlp_out.cast(),
                        mlp_out_bias: lw.mlp_out_bias.cast(),
                    })
                    .collect(),
                final_ln_gain: w.final_ln_gain.cast(),
                final_ln_bias: w.final_ln_bias.cast(),
                unembedding: w.unembedding.as_ref().map(Tensor::cast),
            },
            tokenizer: Arc::clone(&self.tokenizer),
        }
    }

    /// Byte-level BPE encoding of `text`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.tokenizer.encode(text)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        self.tokenizer.decode(ids)
    }

    /// Hex SHA-256 of every tensor (name and little-endian bytes) in layout order.
    pub fn weights_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.weights.named() {
            hasher.update(name.as_bytes());
            buf.clear();
            for v in &t.data {
                v.extend_le_bytes(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Per-tensor hex SHA-256, keyed by checkpoint name.
    pub fn tensor_hashes(&self) -> std::collections::BTreeMap<String, String> {
        let mut buf = Vec::new();
        self.weights
            .named()
            .into_iter()
            .map(|(name, t)| {
                buf.clear();
                for v in &t.data {
                    v.extend_le_bytes(&mut buf);
                }
                (name, hex::encode(Sha256::digest(&buf)))
            })
            .collect()
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(KnError::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_positions {
            return Err(KnError::InvalidInput(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(KnError::OutOfRange(format!(
                "token id {bad} >= vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn check_answer(&self, answer: u32) -> Result<()> {
        if answer as usize >= self.config.vocab_size {
            return Err(KnError::OutOfRange(format!(
                "answer token {answer} >= vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}
