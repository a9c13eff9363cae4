// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference outputs shipped in a bundle's `golden/` directory.
//!
//! Every file is self-describing (inputs, expected values and tolerance):
//!
//! - `logits.json`: `{"tolerance", "prompts": [{"text", "token_ids", "final_logits", "argmax"}]}`
//! - `token_ids.jsonl`: one `{"text", "ids"}` object per line
//! - `perplexity.json`: `{"text", "token_ids", "ppl", "rel_tolerance"}`
//! - `answer_probs.json`: `{"tolerance", "cases": [{"text", "token_ids", "answer_token", "prob"}]}`
//!
//! Any of the files may be absent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, OverrideSpec};
use crate::error::{KnError, Result};
use crate::evaluation::{argmax, perplexity};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenPrompt {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub final_logits: Vec<f32>,
    pub argmax: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenLogits {
    pub tolerance: f64,
    pub prompts: Vec<GoldenPrompt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenTokens {
    pub text: String,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenPerplexity {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub ppl: f64,
    pub rel_tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenAnswer {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub answer_token: u32,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenAnswers {
    pub tolerance: f64,
    pub cases: Vec<GoldenAnswer>,
}

/// Contents of a `golden/` directory.
#[derive(Debug, Clone, Default)]
pub struct GoldenSet {
    pub logits: Option<GoldenLogits>,
    pub tokens: Option<Vec<GoldenTokens>>,
    pub perplexity: Option<GoldenPerplexity>,
    pub answers: Option<GoldenAnswers>,
}

/// Outcome of one golden comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let raw = fs::read(path).map_err(|e| KnError::io(path, e))?;
    serde_json::from_slice(&raw)
        .map(Some)
        .map_err(|e| KnError::parse(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("golden data serializes");
    fs::write(path, json).map_err(|e| KnError::io(path, e))
}

impl GoldenSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let tokens_path = dir.join("token_ids.jsonl");
        let tokens = if tokens_path.exists() {
            let text = fs::read_to_string(&tokens_path).map_err(|e| KnError::io(&tokens_path, e))?;
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                out.push(serde_json::from_str(line).map_err(|e| {
                    KnError::parse(format!("{}:{}", tokens_path.display(), i + 1), e)
                })?);
            }
            Some(out)
        } else {
            None
        };
        Ok(Self {
            logits: read_json(&dir.join("logits.json"))?,
            tokens,
            perplexity: read_json(&dir.join("perplexity.json"))?,
            answers: read_json(&dir.join("answer_probs.json"))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| KnError::io(dir, e))?;
        if let Some(l) = &self.logits {
            write_json(&dir.join("logits.json"), l)?;
        }
        if let Some(p) = &self.perplexity {
            write_json(&dir.join("perplexity.json"), p)?;
        }
        if let Some(a) = &self.answers {
            write_json(&dir.join("answer_probs.json"), a)?;
        }
        if let Some(t) = &self.tokens {
            let mut s = String::new();
            for rec in t {
                s.push_str(&serde_json::to_string(rec).expect("serializes"));
                s.push('\n');
            }
            let path = dir.join("token_ids.jsonl");
            fs::write(&path, s).map_err(|e| KnError::io(&path, e))?;
        }
        Ok(())
    }

    /// Records `model`'s own outputs as a golden set.
    pub fn record(
        model: &Model<f32>,
        prompts: &[&str],
        lines: &[&str],
        ppl_text: Option<&str>,
        answers: &[(&str, u32)],
    ) -> Result<Self> {
        let mut golden = Vec::new();
        for &text in prompts {
            let token_ids = model.tokenize(text)?;
            let final_logits = model.final_logits(&token_ids, &OverrideSpec::none())?;
            let am = argmax(&final_logits) as u32;
            golden.push(GoldenPrompt {
                text: text.into(),
                token_ids,
                final_logits,
                argmax: am,
            });
        }
        let tokens = lines
            .iter()
            .map(|&t| {
                Ok(GoldenTokens {
                    text: t.into(),
                    ids: model.tokenize(t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let perplexity = match ppl_text {
            Some(text) => {
                let token_ids = model.tokenize(text)?;
                Some(GoldenPerplexity {
                    text: text.into(),
                    ppl: perplexity(model, &token_ids)?,
                    token_ids,
                    rel_tolerance: 0.01,
                })
            }
            None => None,
        };
        let cases = answers
            .iter()
            .map(|&(text, answer_token)| {
                let token_ids = model.tokenize(text)?;
                let prob = model.answer_probability(&token_ids, answer_token, &OverrideSpec::none())?;
                Ok(GoldenAnswer {
                    text: text.into(),
                    token_ids,
                    answer_token,
                    prob,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            logits: (!golden.is_empty()).then_some(GoldenLogits {
                tolerance: 1e-3,
                prompts: golden,
            }),
            tokens: (!tokens.is_empty()).then_some(tokens),
            perplexity,
            answers: (!cases.is_empty()).then_some(GoldenAnswers {
                tolerance: 1e-4,
                cases,
            }),
        })
    }

    /// Compares `model` against every reference present.
    pub fn check(&self, model: &Model<f32>) -> Result<Vec<GoldenCheck>> {
        let mut out = Vec::new();
        if let Some(g) = &self.logits {
            let mut worst = 0f64;
            let mut argmax_ok = true;
            for p in &g.prompts {
                let logits = model.final_logits(&p.token_ids, &OverrideSpec::none())?;
                if logits.len() != p.final_logits.len() {
                    return Err(KnError::ShapeMismatch(format!(
                        "golden logits for {:?} have {} entries, model has {}",
                        p.text,
                        p.final_logits.len(),
                        logits.len()
                    )));
                }
                for (a, b) in logits.iter().zip(&p.final_logits) {
                    worst = worst.max(f64::from((a - b).abs()));
                }
                argmax_ok &= argmax(&logits) as u32 == p.argmax;
            }
            out.push(GoldenCheck {
                name: "logits".into(),
                passed: worst <= g.tolerance,
                detail: format!("max abs diff {worst:.3e} (tolerance {:.0e})", g.tolerance),
            });
            out.push(GoldenCheck {
                name: "argmax".into(),
                passed: argmax_ok,
                detail: format!("{} prompts", g.prompts.len()),
            });
        }
        if let Some(t) = &self.tokens {
            let mut mismatches = 0;
            for rec in t {
                if model.tokenize(&rec.text)? != rec.ids {
                    mismatches += 1;
                }
            }
            out.push(GoldenCheck {
                name: "token_ids".into(),
                passed: mismatches == 0,
                detail: format!("{mismatches} of {} lines differ", t.len()),
            });
        }
        if let Some(p) = &self.perplexity {
            let ppl = perplexity(model, &p.token_ids)?;
            let rel = (ppl - p.ppl).abs() / p.ppl;
            out.push(GoldenCheck {
                name: "perplexity".into(),
                passed: rel <= p.rel_tolerance,
                detail: format!("ppl {ppl:.4} vs {:.4} (rel {rel:.2e})", p.ppl),
            });
        }
        if let Some(a) = &self.answers {
            let mut worst = 0f64;
            for c in &a.cases {
                let prob = model.answer_probability(&c.token_ids, c.answer_token, &OverrideSpec::none())?;
                worst = worst.max((prob - c.prob).abs());
            }
            out.push(GoldenCheck {
                name: "answer_probability".into(),
                passed: worst <= a.tolerance,
                detail: format!("max abs diff {worst:.3e}"),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::toy_model;

    #[test]
    fn recorded_golden_set_passes_and_detects_drift() {
        let m = toy_model(42);
        let g = GoldenSet::record(
            &m,
            &["the cat", "hello there"],
            &["a line", "another line of the text"],
            Some("the quick brown fox jumps over the lazy dog"),
            &[("the capital is", 5)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let back = GoldenSet::load(dir.path()).unwrap();
        assert!(back.check(&m).unwrap().iter().all(|c| c.passed));

        let other = toy_model(43);
        let checks = back.check(&other).unwrap();
        assert!(!checks.iter().find(|c| c.name == "logits").unwrap().passed);
        assert!(checks.iter().find(|c| c.name == "token_ids").unwrap().passed);
    }

    #[test]
    fn empty_directory_has_no_checks() {
        let dir = tempfile::tempdir().unwrap();
        let g = GoldenSet::load(dir.path()).unwrap();
        assert!(g.check(&toy_model(1)).unwrap().is_empty());
    }
}
