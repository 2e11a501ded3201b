// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk run bundle and its manifest.
//!
//! Every file a stage writes is recorded with its SHA-256. A stage may only
//! start once all earlier stages are complete and their files still hash to
//! the recorded values; starting a stage invalidates it and everything after.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_FORMAT: &str = "patchlab-bundle";
pub const BUNDLE_VERSION: u32 = 1;
/// Resolved configuration, written when the bundle is created.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenSuites,
    TrainProbe,
    Sweep,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::GenSuites,
        Stage::TrainProbe,
        Stage::Sweep,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenSuites => "gen-suites",
            Stage::TrainProbe => "train-probe",
            Stage::Sweep => "sweep",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|&s| s == self).expect("listed");
        &Stage::ALL[..i]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
    /// Stage that wrote the file; `None` for the config copy.
    pub stage: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_sha256: String,
    /// SHA-256 of external inputs (model archive, tokenizer files, word banks).
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<Stage, StageStatus>,
    /// Bundle-relative path (forward slashes) to entry.
    pub files: BTreeMap<String, FileEntry>,
    pub complete: bool,
    pub error: Option<String>,
}

impl Manifest {
    fn new(config_sha256: String, inputs: BTreeMap<String, String>) -> Self {
        Self {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            config_sha256,
            inputs,
            stages: Stage::ALL.iter().map(|&s| (s, StageStatus::Pending)).collect(),
            files: BTreeMap::new(),
            complete: false,
            error: None,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug)]
pub struct Bundle {
    root: PathBuf,
    manifest: Manifest,
}

impl Bundle {
    /// Start a bundle in `root`, or resume one made from the same config.
    ///
    /// A directory holding a bundle from another config is refused unless
    /// `reset` is set, in which case that bundle's recorded files are removed.
    pub fn create(
        root: &Path,
        config_sha256: &str,
        config_toml: &str,
        inputs: BTreeMap<String, String>,
        reset: bool,
    ) -> Result<Self> {
        if root.join(MANIFEST_FILE).exists() {
            let old = Self::open(root)?;
            if old.manifest.config_sha256 == config_sha256 && old.manifest.inputs == inputs && !reset {
                return Ok(old);
            }
            if !reset {
                return Err(Error::Bundle(format!(
                    "{} holds a bundle from another configuration or inputs (config {}); use a fresh output directory or reset it",
                    root.display(),
                    old.manifest.config_sha256
                )));
            }
            for rel in old.manifest.files.keys() {
                let _ = fs::remove_file(root.join(rel));
            }
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut b = Self {
            root: root.to_path_buf(),
            manifest: Manifest::new(config_sha256.into(), inputs),
        };
        b.write_entry(CONFIG_FILE, config_toml.as_bytes(), None)?;
        b.save()?;
        Ok(b)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Bundle(format!("no {MANIFEST_FILE} in {}", root.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
            return Err(Error::Bundle(format!(
                "{} is {} v{}, expected {BUNDLE_FORMAT} v{BUNDLE_VERSION}",
                path.display(),
                manifest.format,
                manifest.version
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.manifest.stages[&stage]
    }

    fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Differences between the manifest and the disk for the given stages
    /// (plus the config copy). Empty when they agree.
    pub fn diff(&self, stages: &[Stage]) -> Vec<String> {
        let mut out = Vec::new();
        for &s in stages {
            let st = self.status(s);
            if st != StageStatus::Complete {
                out.push(format!("stage {s}: {st:?}, expected Complete").to_lowercase());
            }
        }
        for (rel, entry) in &self.manifest.files {
            if entry.stage.is_some_and(|s| !stages.contains(&s)) {
                continue;
            }
            match sha256_file(&self.root.join(rel)) {
                Ok(h) if h == entry.sha256 => {}
                Ok(h) => out.push(format!("{rel}: sha256 {h}, manifest has {}", entry.sha256)),
                Err(_) => out.push(format!("{rel}: listed in manifest but missing")),
            }
        }
        let listed: BTreeSet<&str> = self.manifest.files.keys().map(String::as_str).collect();
        for rel in walk(&self.root) {
            if rel != MANIFEST_FILE && !listed.contains(rel.as_str()) {
                out.push(format!("{rel}: present on disk but not in manifest"));
            }
        }
        out
    }

    /// Fail with the manifest diff unless `stages` are complete and intact.
    pub fn require(&self, stages: &[Stage]) -> Result<()> {
        let diff = self.diff(stages);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Bundle(format!(
                "bundle {} is incomplete:\n  {}",
                self.root.display(),
                diff.join("\n  ")
            )))
        }
    }

    /// Check prerequisites, then reset `stage` and every later stage.
    pub fn begin(&mut self, stage: Stage) -> Result<()> {
        self.require(stage.prerequisites())?;
        let stale: Vec<String> = self
            .manifest
            .files
            .iter()
            .filter(|(_, e)| e.stage.is_some_and(|s| s >= stage))
            .map(|(k, _)| k.clone())
            .collect();
        for rel in stale {
            let _ = fs::remove_file(self.root.join(&rel));
            self.manifest.files.remove(&rel);
        }
        for (&s, st) in self.manifest.stages.iter_mut() {
            if s >= stage {
                *st = StageStatus::Pending;
            }
        }
        self.manifest.stages.insert(stage, StageStatus::Running);
        self.manifest.complete = false;
        self.manifest.error = None;
        self.save()
    }

    /// Write a file for a running stage and record its hash.
    pub fn write(&mut self, stage: Stage, rel: &str, bytes: &[u8]) -> Result<()> {
        if self.status(stage) != StageStatus::Running {
            return Err(Error::Bundle(format!("stage {stage} is not running")));
        }
        self.write_entry(rel, bytes, Some(stage))
    }

    fn write_entry(&mut self, rel: &str, bytes: &[u8], stage: Option<Stage>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.files.insert(
            rel.to_string(),
            FileEntry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
                stage,
            },
        );
        Ok(())
    }

    /// Record a file that some other writer already placed in the bundle.
    pub fn record(&mut self, stage: Stage, rel: &str) -> Result<()> {
        let bytes = fs::read(self.root.join(rel)).map_err(|e| Error::io(&self.root.join(rel), e))?;
        self.write(stage, rel, &bytes)
    }

    pub fn finish(&mut self, stage: Stage) -> Result<()> {
        self.manifest.stages.insert(stage, StageStatus::Complete);
        self.manifest.complete = self.diff(&Stage::ALL).is_empty();
        self.save()
    }

    pub fn fail(&mut self, stage: Stage, err: &Error) -> Result<()> {
        self.manifest.stages.insert(stage, StageStatus::Failed);
        self.manifest.complete = false;
        self.manifest.error = Some(format!("{stage}: {err}"));
        self.save()
    }

    /// Run `body` as `stage`, marking the manifest failed on error.
    pub fn run_stage<T>(&mut self, stage: Stage, body: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.begin(stage).map_err(|e| e.in_stage(stage.name()))?;
        match body(self) {
            Ok(v) => {
                self.finish(stage)?;
                Ok(v)
            }
            Err(e) => {
                let e = e.in_stage(stage.name());
                self.fail(stage, &e)?;
                Err(e)
            }
        }
    }
}

/// Bundle-relative paths of all regular files under `root`.
fn walk(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(rel) = p.strip_prefix(root) {
                let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(rel.join("/"));
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh() -> (tempfile::TempDir, Bundle) {
        let dir = tempfile::tempdir().unwrap();
        let b = Bundle::create(dir.path(), "abc", "x = 1\n", BTreeMap::new(), false).unwrap();
        (dir, b)
    }

    #[test]
    fn stages_must_run_in_order() {
        let (_d, mut b) = fresh();
        assert!(matches!(b.begin(Stage::Sweep), Err(Error::Bundle(_))));
        b.run_stage(Stage::GenSuites, |b| b.write(Stage::GenSuites, "s/a.txt", b"a")).unwrap();
        assert_eq!(b.status(Stage::GenSuites), StageStatus::Complete);
        assert!(b.begin(Stage::TrainProbe).is_ok());
    }

    #[test]
    fn tampering_shows_in_diff() {
        let (d, mut b) = fresh();
        b.run_stage(Stage::GenSuites, |b| b.write(Stage::GenSuites, "s/a.txt", b"a")).unwrap();
        fs::write(d.path().join("s/a.txt"), b"b").unwrap();
        fs::write(d.path().join("stray"), b"?").unwrap();
        let diff = b.diff(&[Stage::GenSuites]);
        assert!(diff.iter().any(|l| l.starts_with("s/a.txt: sha256")));
        assert!(diff.iter().any(|l| l.starts_with("stray")));
        assert!(b.begin(Stage::TrainProbe).is_err());
    }

    #[test]
    fn rerunning_a_stage_drops_later_outputs() {
        let (d, mut b) = fresh();
        b.run_stage(Stage::GenSuites, |b| b.write(Stage::GenSuites, "a", b"a")).unwrap();
        b.run_stage(Stage::TrainProbe, |b| b.write(Stage::TrainProbe, "p", b"p")).unwrap();
        b.begin(Stage::GenSuites).unwrap();
        assert!(!d.path().join("p").exists());
        assert_eq!(b.status(Stage::TrainProbe), StageStatus::Pending);
    }

    #[test]
    fn failure_is_recorded_and_config_mismatch_refused() {
        let (d, mut b) = fresh();
        let err = b
            .run_stage(Stage::GenSuites, |_| -> Result<()> { Err(Error::Config("boom".into())) })
            .unwrap_err();
        assert!(err.to_string().starts_with("gen-suites:"));
        let reopened = Bundle::open(d.path()).unwrap();
        assert_eq!(reopened.status(Stage::GenSuites), StageStatus::Failed);
        assert!(reopened.manifest().error.as_deref().unwrap().contains("boom"));
        assert!(Bundle::create(d.path(), "other", "", BTreeMap::new(), false).is_err());
        assert!(Bundle::create(d.path(), "other", "", BTreeMap::new(), true).is_ok());
    }

    #[test]
    fn empty_directory_is_not_a_bundle() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(Bundle::open(d.path()), Err(Error::Bundle(_))));
    }
}
