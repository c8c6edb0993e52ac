//! Run configuration: one TOML file with namespaced sections (`data.*`,
//! `model.*`, `train.*`, `tifu.*`, `synth.*`, `eval.*`), every key
//! defaulted, unknown keys rejected. A fully resolved copy is written next
//! to run artifacts so every experiment is reproducible from its output
//! directory alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::derive_seed;
use crate::baselines::TifuConfig;
use crate::error::{CaseError, Result};
use crate::ingest::CsvSpec;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub csv: CsvSpec,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Cap on candidates per example (most recently purchased win).
    pub cap_n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv: CsvSpec::default(),
            train_frac: 0.8,
            val_frac: 0.1,
            cap_n: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![1, 3, 5, 10] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every module draws from a labeled fork of it.
    pub seed: u64,
    /// Upper bound on worker threads (modules are currently sequential).
    pub threads: usize,
    /// `f32` (training default) or `f64`.
    pub precision: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tifu: TifuConfig,
    pub synth: SynthSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            threads: 1,
            precision: "f32".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tifu: TifuConfig::default(),
            synth: SynthSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CaseError::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CaseError::config(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// Applies `key.path=value` overrides (flag wins over file). Values are
    /// parsed as TOML fragments, so `train.lr=0.01`, `model.use_cnn=false`
    /// and `eval.ks=[1,5]` all work; anything unparseable is treated as a
    /// bare string. The merged result re-validates against the full schema,
    /// so typos in key paths are rejected, not silently added.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = toml::Value::try_from(&*self)
            .map_err(|e| CaseError::config(format!("config serialization failed: {e}")))?;
        for pair in overrides {
            let (path, raw) = pair.split_once('=').ok_or_else(|| {
                CaseError::config(format!("override `{pair}` is not of the form key.path=value"))
            })?;
            let value = parse_fragment(raw.trim());
            let segments: Vec<&str> = path.trim().split('.').collect();
            if segments.iter().any(|s| s.is_empty()) {
                return Err(CaseError::config(format!("override key `{path}` has empty segments")));
            }
            insert_path(&mut root, &segments, value, path.trim())?;
        }
        *self = root
            .try_into()
            .map_err(|e| CaseError::config(format!("invalid override: {e}")))?;
        Ok(())
    }

    /// Cross-module validation; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.threads == 0 {
            return Err(CaseError::config("threads must be at least 1"));
        }
        if self.precision != "f32" && self.precision != "f64" {
            return Err(CaseError::config(format!(
                "precision must be f32 or f64, not `{}`",
                self.precision
            )));
        }
        if !(self.data.train_frac > 0.0 && self.data.train_frac < 1.0) {
            return Err(CaseError::config("data.train_frac must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.data.val_frac)
            || self.data.train_frac + self.data.val_frac >= 1.0
        {
            return Err(CaseError::config(
                "data.val_frac must lie in [0, 1) and leave room for a test split",
            ));
        }
        if self.data.cap_n == 0 {
            return Err(CaseError::config("data.cap_n must be positive"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CaseError::config("eval.ks must be non-empty positive cutoffs"));
        }
        let warnings = self.model.validate()?;
        self.train.validate()?;
        self.tifu.validate()?;
        self.synth.validate()?;
        Ok(warnings)
    }

    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CaseError::config(format!("config serialization failed: {e}")))
    }

    /// Writes the fully resolved config next to run artifacts.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.toml"), self.resolved_toml()?)?;
        Ok(())
    }

    /// The per-module seeds derived from the root, for the run log.
    pub fn seed_tree(&self) -> Vec<(String, u64)> {
        ["data.split", "model.init", "train", "synth"]
            .iter()
            .map(|label| (label.to_string(), derive_seed(self.seed, label, &[])))
            .collect()
    }
}

fn insert_path(
    node: &mut toml::Value,
    segments: &[&str],
    value: toml::Value,
    full_path: &str,
) -> Result<()> {
    let table = node.as_table_mut().ok_or_else(|| {
        CaseError::config(format!(
            "override key `{full_path}` descends into a non-table value"
        ))
    })?;
    match segments {
        [] => unreachable!("override paths always have at least one segment"),
        [last] => {
            table.insert(last.to_string(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            insert_path(child, rest, value, full_path)
        }
    }
}

fn parse_fragment(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::CsvSchema;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.resolved_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.resolved_toml().unwrap(), text);
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[model]\nwindow = 3\n").unwrap_err();
        assert!(err.to_string().contains("window"), "{err}");
        assert!(toml::from_str::<RunConfig>("banana = 1\n").is_err());
    }

    #[test]
    fn overrides_reach_nested_keys_with_types() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "train.lr=0.01".into(),
            "model.use_cnn=false".into(),
            "eval.ks=[1, 5]".into(),
            "data.csv.user_col=uid".into(),
            "data.csv.schema=gaps".into(),
            "precision=f64".into(),
        ])
        .unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert!(!cfg.model.use_cnn);
        assert_eq!(cfg.eval.ks, vec![1, 5]);
        assert_eq!(cfg.data.csv.user_col, "uid");
        assert_eq!(cfg.data.csv.schema, CsvSchema::Gaps);
        assert_eq!(cfg.precision, "f64");
    }

    #[test]
    fn override_typos_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["train.lrate=0.1".into()]).is_err());
        assert!(cfg.apply_overrides(&["no_equals_sign".into()]).is_err());
        assert!(cfg.apply_overrides(&["train.lr=not_a_number".into()]).is_err());
        assert!(cfg.apply_overrides(&["train..lr=0.1".into()]).is_err());
        // A failed batch must not corrupt earlier state.
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
    }

    #[test]
    fn validate_rejects_inconsistent_settings() {
        let cfg = RunConfig {
            precision: "f16".into(),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.train_frac = 0.95;
        cfg.data.val_frac = 0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.eval.ks.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolved_copy_lands_next_to_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        cfg.write_resolved(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
    }

    #[test]
    fn seed_tree_is_stable_and_label_dependent() {
        let cfg = RunConfig::default();
        let tree = cfg.seed_tree();
        assert_eq!(tree.len(), 4);
        let again = cfg.seed_tree();
        assert_eq!(tree, again);
        let seeds: std::collections::HashSet<u64> = tree.iter().map(|(_, s)| *s).collect();
        assert_eq!(seeds.len(), 4, "labels must derive distinct seeds");
    }
}
