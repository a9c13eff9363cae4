// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batch experiments over a checkpoint and a fact file.
//!
//! Output layout under the run directory:
//!
//! ```text
//! manifests/<command>.json           config, code version, input hashes
//! localize/<method>/<fact>/<q>.csv   attribution map
//! localize/<method>/<fact>/<q>.kn.json
//! consistency/{table,u_i,violin,sweep}.csv
//! edit/<mode>_<selection>.csv, edit/summary_<mode>_<selection>.csv
//! edit/sequential_<mode>_<selection>.csv
//! intervene/{neurons,synapses,summary,distribution}.csv, intervene/heatmaps/
//! sweep/sweep.csv
//! report/report.md
//! <command>/failures.json            per-fact failures of the last run
//! ```

mod analysis;
pub mod config;
pub mod edit;
pub mod intervene;
mod localize;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{KnSet, Method};
use crate::consistency::{self, Class, FactConsistency};
use crate::dataset::{self, Fact, LoadReport};
use crate::error::{KnError, Result};
use crate::model::{load_checkpoint, Model};

pub use analysis::{cmd_consistency, cmd_report, cmd_sweep};
pub use config::{RunConfig, OUTPUT_ROOT_ENV};
pub use edit::cmd_edit;
pub use intervene::{cmd_intervene, InterveneTarget};
pub use localize::cmd_localize;

/// One fact or query that could not be processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub key: String,
    pub error: String,
}

/// Outcome of a command.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandSummary {
    pub command: String,
    pub processed: usize,
    pub skipped: usize,
    pub failures: Vec<Failure>,
    pub outputs: Vec<String>,
}

impl CommandSummary {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            ..Self::default()
        }
    }

    /// 0 when no fact failed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.failures.is_empty())
    }

    fn fail(&mut self, key: impl Into<String>, e: &KnError) {
        self.failures.push(Failure {
            key: key.into(),
            error: e.to_string(),
        });
    }
}

/// Everything needed to reproduce a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub args: BTreeMap<String, String>,
    pub input_hashes: BTreeMap<String, String>,
}

pub(crate) fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| KnError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn input_hashes(cfg: &RunConfig) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for f in ["manifest.json", "tensors.bin", "vocab.json", "merges.txt"] {
        let p = cfg.checkpoint_path.join(f);
        if p.exists() {
            out.insert(format!("checkpoint/{f}"), sha256_file(&p)?);
        }
    }
    if cfg.facts_path.exists() {
        out.insert("facts".into(), sha256_file(&cfg.facts_path)?);
    }
    if let Some(p) = cfg.eval_texts_path.as_ref().filter(|p| p.exists()) {
        out.insert("eval_texts".into(), sha256_file(p)?);
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| KnError::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, contents).map_err(|e| KnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| KnError::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(KnError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| KnError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializes") + "\n"
}

/// File-system-safe form of an identifier.
pub(crate) fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Loaded inputs of a run.
pub struct RunContext {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub model: Model<f32>,
    pub facts: Vec<Fact>,
    pub load_report: LoadReport,
}

impl RunContext {
    /// Loads the checkpoint and fact file; `out` is the resolved run directory.
    pub fn open(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let model = load_checkpoint(&cfg.checkpoint_path)?;
        let (mut facts, load_report) = dataset::load_facts(&cfg.facts_path)?;
        if let Some(n) = cfg.max_facts {
            facts.truncate(n);
        }
        Ok(Self {
            cfg,
            out,
            model,
            facts,
            load_report,
        })
    }

    fn write_manifest(&self, command: &str, args: BTreeMap<String, String>) -> Result<()> {
        let m = RunManifest {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            args,
            input_hashes: input_hashes(&self.cfg)?,
        };
        write_file(&self.out.join("manifests").join(format!("{command}.json")), to_json(&m))
    }

    fn finish(&self, summary: &CommandSummary) -> Result<()> {
        write_file(
            &self.out.join(&summary.command).join("failures.json"),
            to_json(&summary.failures),
        )
    }

    pub(crate) fn kn_dir(&self, method: Method, fact_id: &str) -> PathBuf {
        self.out.join("localize").join(method.as_str()).join(safe_name(fact_id))
    }

    /// Knowledge-neuron sets of every query of `fact`, in query order.
    pub(crate) fn load_kn_sets(&self, method: Method, fact: &Fact) -> Result<Vec<KnSet>> {
        let dir = self.kn_dir(method, &fact.fact_id);
        (0..fact.templates.len())
            .map(|q| {
                let p = dir.join(format!("{q}.kn.json"));
                serde_json::from_str(&read_text(&p)?).map_err(|e| KnError::parse(p.display().to_string(), e))
            })
            .collect()
    }

    /// Scores and classifies every fact with localization outputs for
    /// `method`. Facts without outputs are returned as failures.
    pub(crate) fn fact_consistency(&self, method: Method) -> Result<(Vec<FactConsistency>, Vec<Failure>)> {
        let mut facts = Vec::new();
        let mut failures = Vec::new();
        for f in &self.facts {
            match self.load_kn_sets(method, f).and_then(|sets| {
                FactConsistency::new(&f.fact_id, &f.relation, sets.into_iter().map(|s| s.neurons).collect())
            }) {
                Ok(fc) => facts.push(fc),
                Err(e) => failures.push(Failure {
                    key: format!("{method}/{}", f.fact_id),
                    error: e.to_string(),
                }),
            }
        }
        if !facts.is_empty() {
            let threshold = consistency::threshold_for(&facts, self.cfg.threshold_kind, self.cfg.static_threshold)
                .unwrap_or(self.cfg.static_threshold);
            consistency::classify_facts(&mut facts, threshold);
        }
        Ok((facts, failures))
    }

    /// Knowledge class of each fact under the primary method.
    pub(crate) fn classes(&self) -> Result<BTreeMap<String, Class>> {
        let (facts, _) = self.fact_consistency(self.cfg.primary_method())?;
        Ok(facts.into_iter().map(|f| (f.fact_id, f.classification)).collect())
    }

    /// Tokenized evaluation texts (empty when none are configured).
    pub(crate) fn eval_tokens(&self) -> Result<Vec<Vec<u32>>> {
        let Some(p) = &self.cfg.eval_texts_path else {
            return Ok(Vec::new());
        };
        dataset::load_eval_texts(p)?
            .iter()
            .map(|t| self.model.tokenize(t))
            .filter(|r| r.as_ref().map_or(true, |v| v.len() >= 2))
            .collect()
    }
}

/// Mean of a slice; NaN when empty.
pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safe_names() {
        assert_eq!(safe_name("P39/a b"), "P39_a_b");
        assert_eq!(safe_name("ok-1.2_x"), "ok-1.2_x");
    }

    #[test]
    fn exit_codes() {
        let mut s = CommandSummary::new("x");
        assert_eq!(s.exit_code(), 0);
        s.fail("f", &KnError::InvalidInput("bad".into()));
        assert_eq!(s.exit_code(), 1);
    }
}
