// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative experiment configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{AnalysisConfig, HypothesisThresholds};
use crate::model::ModelConfig;
use crate::patching::PositionMode;
use crate::probe::ProbeHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub tokenizer: TokenizerSection,
    pub seeds: Seeds,
    #[serde(default)]
    pub suites: SuiteSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    /// Where and how to run; excluded from the config hash.
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Safetensors file, or a directory holding `model.safetensors`.
    pub archive: PathBuf,
    /// `gpt2-small`, `tiny-fixture`, or a path to a JSON `ModelConfig`.
    #[serde(default = "default_model_config")]
    pub config: String,
}

fn default_model_config() -> String {
    "gpt2-small".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab: PathBuf,
    pub merges: PathBuf,
}

/// Every random choice in a run derives from one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub suite: u64,
    pub subsample: u64,
    pub probe: u64,
    pub permutation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    pub lexical_size: usize,
    pub contextual_size: usize,
    pub lexical_subsample: f64,
    pub contextual_subsample: f64,
    /// Cap applied after subsampling, mostly for smoke runs.
    pub max_per_phenomenon: Option<usize>,
    /// Replacement word banks; the built-in ones otherwise.
    pub lexicon: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            lexical_size: crate::datagen::LEXICAL_SUITE_SIZE,
            contextual_size: crate::datagen::CONTEXTUAL_SUITE_SIZE,
            lexical_subsample: 0.2,
            contextual_subsample: 0.05,
            max_per_phenomenon: None,
            lexicon: None,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub corpus_size: usize,
    /// Use a saved probe instead of training one.
    pub path: Option<PathBuf>,
    /// Also train on shuffled labels and record the held-out accuracy.
    pub shuffled_baseline: bool,
    pub hyper: ProbeHyper,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            corpus_size: 2_000,
            path: None,
            shuffled_baseline: true,
            hyper: ProbeHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub modes: Vec<PositionMode>,
    pub min_contexts: usize,
    pub permutation_resamples: usize,
    pub thresholds: HypothesisThresholds,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let d = AnalysisConfig::default();
        Self {
            modes: PositionMode::ALL_MODES.to_vec(),
            min_contexts: d.min_contexts,
            permutation_resamples: d.permutation_resamples,
            thresholds: d.thresholds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output: PathBuf,
    /// 0 = all cores.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs/default"),
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        Self::from_toml_with(text, base, &[])
    }

    /// As [`from_toml`](Self::from_toml), after applying `section.key = value`
    /// overrides. Values are TOML literals; anything that does not parse as one
    /// is taken as a string.
    pub fn from_toml_with(text: &str, base: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let parse_err = |e: toml::de::Error| Error::Parse {
            file: "experiment config".into(),
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        };
        let mut table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let mut cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, &[])
    }

    pub fn load_with(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_with(&text, base, overrides)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.model.archive);
        fix(&mut self.tokenizer.vocab);
        fix(&mut self.tokenizer.merges);
        fix(&mut self.run.output);
        for p in [&mut self.suites.lexicon, &mut self.suites.templates, &mut self.probe.path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if self.model.config.ends_with(".json") {
            let mut p = PathBuf::from(&self.model.config);
            fix(&mut p);
            self.model.config = p.to_string_lossy().into_owned();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.suites;
        for (name, f) in [("lexical_subsample", s.lexical_subsample), ("contextual_subsample", s.contextual_subsample)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("suites.{name} = {f} is outside (0, 1]")));
            }
        }
        if s.lexicon.is_some() != s.templates.is_some() {
            return Err(Error::Config("suites.lexicon and suites.templates must be given together".into()));
        }
        if s.max_per_phenomenon == Some(0) {
            return Err(Error::Config("suites.max_per_phenomenon must be positive".into()));
        }
        if self.analysis.modes.is_empty() {
            return Err(Error::Config("analysis.modes is empty".into()));
        }
        let mut modes = self.analysis.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.analysis.modes.len() {
            return Err(Error::Config("analysis.modes lists a mode twice".into()));
        }
        if self.analysis.modes.contains(&PositionMode::ControlWords)
            && !self.analysis.modes.contains(&PositionMode::TargetWords)
        {
            return Err(Error::Config("control-words mode needs target-words".into()));
        }
        if self.analysis.min_contexts < 2 {
            return Err(Error::Config("analysis.min_contexts must be at least 2".into()));
        }
        self.model_config()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = match self.model.config.as_str() {
            "gpt2-small" => ModelConfig::gpt2_small(),
            "tiny-fixture" => ModelConfig::tiny_fixture(),
            path if path.ends_with(".json") => {
                let path = Path::new(path);
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    file: path.display().to_string(),
                    line: e.line(),
                    message: e.to_string(),
                })?
            }
            other => {
                return Err(Error::Config(format!(
                    "model.config `{other}` is neither a preset nor a .json file"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn analysis_config(&self) -> AnalysisConfig {
        AnalysisConfig {
            min_contexts: self.analysis.min_contexts,
            permutation_resamples: self.analysis.permutation_resamples,
            permutation_seed: self.seeds.permutation,
            thresholds: self.analysis.thresholds.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form, `run` section excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("run");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
