// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge-neuron localization, intervention and editing for GPT-2-style
//! checkpoints.

pub mod attribution;
pub mod consistency;
pub mod dataset;
pub mod editing;
pub mod error;
pub mod evaluation;
pub mod intervention;
pub mod model;
pub mod pipeline;

pub use error::{KnError, Result};
pub use model::{Model, ModelConfig, NeuronId, SynapseId};
