// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{Method, DEFAULT_SELECTION_FRACTION, DEFAULT_STEPS};
use crate::consistency::{ThresholdKind, DEFAULT_STATIC_THRESHOLD};
use crate::editing::{DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_CAS_RATIO, DEFAULT_LAMBDA};
use crate::error::{KnError, Result};
use crate::intervention::DEFAULT_ALPHA;

/// Environment variable naming the directory relative output directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "KNLOC_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub checkpoint_path: PathBuf,
    pub facts_path: PathBuf,
    pub eval_texts_path: Option<PathBuf>,
    /// Attribution methods to localize with; the first drives edit and intervene.
    pub methods: Vec<Method>,
    pub steps: usize,
    pub selection_fraction: f64,
    pub threshold_kind: ThresholdKind,
    pub static_threshold: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub cas_ratio: f64,
    pub suppress_factor: f64,
    pub enhance_factor: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Process only the first `max_facts` facts.
    pub max_facts: Option<usize>,
    pub unrelated_count: usize,
    pub ppl_samples: usize,
    pub sequential_facts: usize,
    pub sequential_runs: usize,
    /// Facts (in file order) that get before/after activation heatmaps.
    pub heatmap_facts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint_path: PathBuf::from("checkpoint"),
            facts_path: PathBuf::from("facts.jsonl"),
            eval_texts_path: None,
            methods: vec![Method::Ig],
            steps: DEFAULT_STEPS,
            selection_fraction: DEFAULT_SELECTION_FRACTION,
            threshold_kind: ThresholdKind::Static,
            static_threshold: DEFAULT_STATIC_THRESHOLD,
            alpha: DEFAULT_ALPHA,
            lambda1: DEFAULT_LAMBDA,
            lambda2: DEFAULT_LAMBDA,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            cas_ratio: DEFAULT_CAS_RATIO,
            suppress_factor: 0.0,
            enhance_factor: 2.0,
            seed: 0,
            output_dir: PathBuf::from("run"),
            max_facts: None,
            unrelated_count: 10,
            ppl_samples: 5,
            sequential_facts: 100,
            sequential_runs: 5,
            heatmap_facts: 3,
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides (values are TOML
    /// literals; bare words are taken as strings).
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| KnError::parse("config", e))?;
        for (k, v) in overrides {
            table.insert(k.clone(), parse_override_value(v));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| KnError::parse("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) and applies overrides. Relative
    /// input paths resolve against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(KnError::MissingFile(p.to_path_buf()));
                }
                let text = fs::read_to_string(p).map_err(|e| KnError::io(p, e))?;
                (text, p.parent().map(Path::to_path_buf))
            }
            None => (String::new(), None),
        };
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.checkpoint_path);
            fix(&mut cfg.facts_path);
            if let Some(p) = cfg.eval_texts_path.as_mut() {
                fix(p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KnError::InvalidInput(m));
        if self.methods.is_empty() {
            return bad("methods must list at least one attribution method".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods lists a method twice".into());
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        for (name, v, lo_open, hi) in [
            ("selection_fraction", self.selection_fraction, true, 1.0),
            ("cas_ratio", self.cas_ratio, true, 1.0),
            ("static_threshold", self.static_threshold, false, 1.0),
        ] {
            let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
            if !(lo_ok && v <= hi) {
                return bad(format!("{name} = {v} out of range"));
            }
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha = {} must be > 0", self.alpha));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("suppress_factor", self.suppress_factor),
            ("enhance_factor", self.enhance_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be >= 0"));
            }
        }
        if self.unrelated_count == 0 || self.sequential_runs == 0 || self.sequential_facts == 0 {
            return bad("unrelated_count, sequential_facts and sequential_runs must be >= 1".into());
        }
        Ok(())
    }

    pub fn primary_method(&self) -> Method {
        self.methods[0]
    }

    /// Output directory, resolved against `root` when relative.
    pub fn resolved_output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Output directory, resolved against the `KNLOC_OUTPUT_ROOT` environment variable.
    pub fn output_dir_from_env(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        self.resolved_output_dir(root.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml(), &[]).unwrap(), d);
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), d);
        assert_eq!((d.static_threshold, d.lambda1, d.lambda2, d.alpha), (0.1, 2.0, 2.0, 0.3));
        assert_eq!((d.beta1, d.beta2, d.cas_ratio, d.steps), (0.7, 0.3, 0.3, 20));
        assert_eq!((d.sequential_facts, d.sequential_runs), (100, 5));
    }

    #[test]
    fn overrides_win() {
        let ov = vec![
            ("steps".to_string(), "7".to_string()),
            ("methods".into(), "[\"ig\", \"amig\"]".into()),
            ("output_dir".into(), "out/x".into()),
        ];
        let c = RunConfig::from_toml("steps = 3\nseed = 9\n", &ov).unwrap();
        assert_eq!((c.steps, c.seed), (7, 9));
        assert_eq!(c.methods, vec![Method::Ig, Method::Amig]);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn invalid_configs() {
        assert!(RunConfig::from_toml("steps = 0", &[]).is_err());
        assert!(RunConfig::from_toml("bogus = 1", &[]).is_err());
        assert!(RunConfig::from_toml("cas_ratio = 1.5", &[]).is_err());
        assert!(RunConfig::from_toml("methods = [\"ig\", \"ig\"]", &[]).is_err());
    }

    #[test]
    fn output_root_resolution() {
        let c = RunConfig::default();
        assert_eq!(c.resolved_output_dir(Some(Path::new("/r"))), PathBuf::from("/r/run"));
        let abs = RunConfig {
            output_dir: "/abs".into(),
            ..c
        };
        assert_eq!(abs.resolved_output_dir(Some(Path::new("/r"))), PathBuf::from("/abs"));
    }

    #[test]
    fn relative_inputs_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "facts_path = \"f.jsonl\"\n").unwrap();
        let c = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(c.facts_path, dir.path().join("f.jsonl"));
        assert!(RunConfig::load(Some(&dir.path().join("nope.toml")), &[]).is_err());
    }
}
