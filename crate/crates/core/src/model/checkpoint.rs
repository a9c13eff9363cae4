// SPDX-License-Identifier: MIT OR Apache-2.0

//! KNPC checkpoint bundles.
//!
//! A bundle is a directory holding:
//!
//! - `manifest.json`: `{"magic":"KNPC","version":1,"config":{..},"tensors":[{"name","shape","offset","length"}..]}`
//!   where `offset` and `length` are byte counts into `tensors.bin`;
//! - `tensors.bin`: row-major little-endian `f32` data at the manifest offsets;
//! - `vocab.json` and `merges.txt` in GPT-2 tokenizer format;
//! - optionally `golden/` reference outputs (see [`super::golden`]).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{bytes_to_unicode, BpeTables, EOS_TOKEN};
use super::{tensor_layout, Model, ModelConfig, Tensor, Weights};
use crate::error::{KnError, Result};

pub const MAGIC: &str = "KNPC";
pub const VERSION: u32 = 1;

/// Half-width of the uniform distribution toy weights are drawn from.
pub const TOY_WEIGHT_RANGE: f32 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(KnError::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| KnError::io(path, e))
}

/// Loads and validates a bundle.
pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let manifest_path = dir.join("manifest.json");
    let raw = read_file(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| KnError::parse(manifest_path.display().to_string(), e))?;
    if manifest.magic != MAGIC || manifest.version != VERSION {
        return Err(KnError::Format(format!(
            "expected {MAGIC} v{VERSION}, found {} v{}",
            manifest.magic, manifest.version
        )));
    }
    manifest.config.validate()?;
    let data = read_file(&dir.join("tensors.bin"))?;
    let tokenizer = BpeTables::from_files(&dir.join("vocab.json"), &dir.join("merges.txt"))?;

    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.length != (n * 4) as u64 {
            return Err(KnError::ShapeMismatch(format!(
                "tensor {} declares {} bytes but shape {:?} needs {}",
                e.name,
                e.length,
                e.shape,
                n * 4
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .ok_or_else(|| KnError::OutOfRange(format!("tensor {} extent overflows", e.name)))?;
        if end > data.len() as u64 {
            return Err(KnError::ShapeMismatch(format!(
                "tensor {} needs bytes {}..{end} but tensors.bin holds {}",
                e.name,
                e.offset,
                data.len()
            )));
        }
        let bytes = &data[e.offset as usize..end as usize];
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors
            .insert(e.name.clone(), Tensor::from_vec(&e.shape, values)?)
            .is_some()
        {
            return Err(KnError::Format(format!("tensor {} listed twice", e.name)));
        }
    }
    let weights = Weights::from_named(&manifest.config, tensors)?;
    Model::new(manifest.config, weights, tokenizer)
}

/// Writes `model` as a bundle into `dir`, creating it if needed.
pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| KnError::io(dir, e))?;
    let mut bin = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in model.weights.named() {
        let offset = bin.len() as u64;
        for v in &t.data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset,
            length: bin.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        magic: MAGIC.into(),
        version: VERSION,
        config: model.config.clone(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let (vocab, merges) = model.tokenizer.to_files_contents();
    for (name, bytes) in [
        ("manifest.json", json.into_bytes()),
        ("tensors.bin", bin),
        ("vocab.json", vocab.into_bytes()),
        ("merges.txt", merges.into_bytes()),
    ] {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| KnError::io(&path, e))?;
    }
    Ok(())
}

/// The synthetic tokenizer of toy bundles: the 95 printable ASCII bytes, four
/// merges (`th`, `the`, `Ġt`, `er`) and `<|endoftext|>`, 100 tokens in all.
pub fn toy_tokenizer() -> BpeTables {
    let enc = bytes_to_unicode();
    let mut vocab = HashMap::new();
    for b in 0x20u8..=0x7E {
        let id = vocab.len() as u32;
        vocab.insert(enc[b as usize].to_string(), id);
    }
    let merges: Vec<(String, String)> = [("t", "h"), ("th", "e"), ("Ġ", "t"), ("e", "r")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    for (a, b) in &merges {
        let id = vocab.len() as u32;
        vocab.insert(format!("{a}{b}"), id);
    }
    let id = vocab.len() as u32;
    vocab.insert(EOS_TOKEN.to_string(), id);
    BpeTables::new(vocab, merges).expect("toy tokenizer is consistent")
}

/// Builds an in-memory seeded model for `config`.
///
/// Linear weights and biases are uniform in `[-0.08, 0.08]`; layer-norm gains
/// are one and their biases zero. The tokenizer is [`toy_tokenizer`] when
/// `config.vocab_size == 100`, otherwise a byte-only vocabulary padded with
/// placeholder tokens.
pub fn toy_model_with(config: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    config.validate()?;
    let tokenizer = if config.vocab_size == 100 {
        toy_tokenizer()
    } else {
        padded_tokenizer(config.vocab_size)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in tensor_layout(config, false) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.contains("ln_") && name.ends_with(".weight") {
            vec![1.0; n]
        } else if name.contains("ln_") {
            vec![0.0; n]
        } else {
            (0..n)
                .map(|_| rng.gen_range(-TOY_WEIGHT_RANGE..=TOY_WEIGHT_RANGE))
                .collect()
        };
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    let weights = Weights::from_named(config, tensors)?;
    Model::new(config.clone(), weights, tokenizer)
}

/// The standard toy model (see [`ModelConfig::toy`]).
pub fn toy_model(seed: u64) -> Model<f32> {
    toy_model_with(&ModelConfig::toy(), seed).expect("toy config is valid")
}

fn padded_tokenizer(vocab_size: usize) -> Result<BpeTables> {
    if vocab_size < 257 {
        return Err(KnError::InvalidInput(format!(
            "non-toy vocab_size {vocab_size} must cover 256 bytes plus end-of-sequence"
        )));
    }
    let enc = bytes_to_unicode();
    let mut vocab: HashMap<String, u32> = HashMap::new();
    for c in enc {
        let id = vocab.len() as u32;
        vocab.insert(c.to_string(), id);
    }
    while vocab.len() < vocab_size - 1 {
        let id = vocab.len() as u32;
        vocab.insert(format!("<|unused{id}|>"), id);
    }
    let id = vocab.len() as u32;
    vocab.insert(EOS_TOKEN.to_string(), id);
    BpeTables::new(vocab, Vec::new())
}

/// Writes a deterministic toy bundle: the same `(config, seed)` always yields
/// byte-identical files.
pub fn generate_toy_checkpoint(config: &ModelConfig, seed: u64, dir: &Path) -> Result<()> {
    let model = toy_model_with(config, seed)?;
    save_checkpoint(&model, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        generate_toy_checkpoint(&ModelConfig::toy(), 42, dir.path()).unwrap();
        let m = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.config.n_layers, 2);
        assert_eq!(m.config.d_model, 32);
        assert_eq!(m.weights_hash(), toy_model(42).weights_hash());
        assert_eq!(m.tokenizer.eos_id(), 99);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        generate_toy_checkpoint(&ModelConfig::toy(), 42, a.path()).unwrap();
        generate_toy_checkpoint(&ModelConfig::toy(), 42, b.path()).unwrap();
        generate_toy_checkpoint(&ModelConfig::toy(), 43, c.path()).unwrap();
        for f in ["manifest.json", "tensors.bin", "vocab.json", "merges.txt"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_ne!(
            fs::read(a.path().join("tensors.bin")).unwrap(),
            fs::read(c.path().join("tensors.bin")).unwrap()
        );
    }

    #[test]
    fn truncated_tensors_are_a_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        generate_toy_checkpoint(&ModelConfig::toy(), 42, dir.path()).unwrap();
        let bin = dir.path().join("tensors.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(KnError::ShapeMismatch(_))));
    }

    #[test]
    fn bad_magic_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(KnError::MissingFile(_))));
        generate_toy_checkpoint(&ModelConfig::toy(), 1, dir.path()).unwrap();
        let mp = dir.path().join("manifest.json");
        let text = fs::read_to_string(&mp).unwrap().replace("\"KNPC\"", "\"XXXX\"");
        fs::write(&mp, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(KnError::Format(_))));
        generate_toy_checkpoint(&ModelConfig::toy(), 1, dir.path()).unwrap();
        fs::remove_file(dir.path().join("merges.txt")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(KnError::MissingFile(_))));
    }

    #[test]
    fn declared_shape_must_match_config() {
        let dir = tempfile::tempdir().unwrap();
        generate_toy_checkpoint(&ModelConfig::toy(), 1, dir.path()).unwrap();
        let mp = dir.path().join("manifest.json");
        let mut man: Manifest = serde_json::from_slice(&fs::read(&mp).unwrap()).unwrap();
        man.config.d_ff = 32;
        fs::write(&mp, serde_json::to_string(&man).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(KnError::ShapeMismatch(_))));
    }

    #[test]
    fn toy_tokenizer_round_trips_ascii() {
        let t = toy_tokenizer();
        assert_eq!(t.vocab_len(), 100);
        let ids = t.encode("the other theater").unwrap();
        assert_eq!(t.decode(&ids).unwrap(), "the other theater");
        assert!(ids.contains(&t.token_id("the").unwrap()));
    }
}
