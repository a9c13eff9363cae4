// SPDX-License-Identifier: MIT OR Apache-2.0

//! Writes a seeded toy bundle, loads it back and prints the next-token
//! distribution, perplexity and a golden self-check.
//!
//! `cargo run --example toy_checkpoint [-- <dir>]`

use std::path::PathBuf;

use knloc::evaluation::perplexity;
use knloc::model::golden::GoldenSet;
use knloc::model::{generate_toy_checkpoint, load_checkpoint, log_softmax_at, ModelConfig, OverrideSpec};

fn main() -> knloc::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().join("toy"));
    generate_toy_checkpoint(&ModelConfig::toy(), 42, &dir)?;
    let model = load_checkpoint(&dir)?;
    println!("bundle {} (weights {})", dir.display(), &model.weights_hash()[..16]);

    let prompt = "the tailor works as a";
    let tokens = model.tokenize(prompt)?;
    let logits = model.final_logits(&tokens, &OverrideSpec::none())?;
    let mut ranked: Vec<(usize, f64)> = (0..logits.len())
        .map(|i| (i, log_softmax_at(&logits, i).exp() as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("{prompt:?} -> {tokens:?}");
    for (id, p) in ranked.iter().take(5) {
        println!("  {:>8?} {p:.4}", model.detokenize(&[*id as u32])?);
    }
    println!("perplexity of the prompt: {:.2}", perplexity(&model, &tokens)?);

    let golden = GoldenSet::record(&model, &[prompt], &[prompt], Some(prompt), &[])?;
    golden.save(&dir.join("golden"))?;
    for c in GoldenSet::load(&dir.join("golden"))?.check(&model)? {
        println!("golden {}: {} ({})", c.name, if c.passed { "ok" } else { "FAILED" }, c.detail);
    }
    Ok(())
}
