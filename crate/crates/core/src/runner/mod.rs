// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs: suites, probe, sweep, metrics and figures, written to a
//! hashed bundle directory.

pub mod bundle;
pub mod config;
pub mod effects;
pub mod figures;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use bundle::{Bundle, Manifest, Stage, StageStatus};
pub use config::ExperimentConfig;
pub use effects::{EffectSet, PairSweep};

use crate::archive::resolve_archive_path;
use crate::datagen::{
    generate_probe_corpus, generate_suite, Lexicon, ProbeCorpusBank, SuiteKind, TestSuite,
    DEFAULT_LEXICON, DEFAULT_TEMPLATES,
};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::metrics::{analyze, AnalysisInputs, MetricReport};
use crate::model::Model;
use crate::patching::{layer_sweep, PositionMode, PreparedPair};
use crate::probe::{extract_representations, train_probe, Probe};
use crate::tokenizer::Tokenizer;

pub const METRICS_FILE: &str = "metrics.json";
pub const PROBE_DIR: &str = "probe";
pub const PROBE_CORPUS_FILE: &str = "probe/corpus.jsonl";
pub const SUITE_SUMMARY_FILE: &str = "suites/summary.json";
pub const REPORT_DIR: &str = "report";

/// Seed offset for the shuffled-label baseline, so it never reuses the split seed's stream.
const SHUFFLE_SEED_OFFSET: u64 = 0x5eed;

pub fn suite_file(kind: SuiteKind) -> String {
    format!("suites/{}.jsonl", kind.name())
}

/// Modes swept on each suite.
pub fn suite_modes(kind: SuiteKind, modes: &[PositionMode]) -> Vec<PositionMode> {
    let allowed: &[PositionMode] = match kind {
        SuiteKind::Lexical => &[PositionMode::TargetWords, PositionMode::ControlWords],
        SuiteKind::Contextual => &[PositionMode::All],
    };
    allowed.iter().copied().filter(|m| modes.contains(m)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg];
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Svg => "svg",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown report format `{s}` (json, csv, svg)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub kind: SuiteKind,
    pub generated: usize,
    pub kept: usize,
    pub counts: BTreeMap<String, usize>,
}

/// Drives the stages of one configured run against its bundle.
pub struct Runner {
    cfg: ExperimentConfig,
    bundle: Bundle,
    exec: Executor,
    model: Option<Arc<Model>>,
    tokenizer: Option<Arc<Tokenizer>>,
}

fn input_hashes(cfg: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    let archive = resolve_archive_path(&cfg.model.archive);
    inputs.insert("model".into(), bundle::sha256_file(&archive)?);
    inputs.insert("tokenizer.vocab".into(), bundle::sha256_file(&cfg.tokenizer.vocab)?);
    inputs.insert("tokenizer.merges".into(), bundle::sha256_file(&cfg.tokenizer.merges)?);
    match (&cfg.suites.lexicon, &cfg.suites.templates) {
        (Some(l), Some(t)) => {
            inputs.insert("lexicon".into(), bundle::sha256_file(l)?);
            inputs.insert("templates".into(), bundle::sha256_file(t)?);
        }
        _ => {
            inputs.insert("lexicon".into(), bundle::sha256_hex(DEFAULT_LEXICON.as_bytes()));
            inputs.insert("templates".into(), bundle::sha256_hex(DEFAULT_TEMPLATES.as_bytes()));
        }
    }
    if let Some(p) = &cfg.probe.path {
        inputs.insert("probe".into(), bundle::sha256_file(&p.join(crate::probe::PROBE_MANIFEST))?);
    }
    Ok(inputs)
}

impl Runner {
    /// Open or create the bundle at `cfg.run.output`.
    pub fn new(cfg: ExperimentConfig, reset: bool) -> Result<Self> {
        cfg.validate()?;
        let inputs = input_hashes(&cfg)?;
        let bundle = Bundle::create(&cfg.run.output, &cfg.hash(), &cfg.to_toml(), inputs, reset)?;
        let exec = Executor::new(cfg.run.workers)?;
        Ok(Self {
            cfg,
            bundle,
            exec,
            model: None,
            tokenizer: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }

    fn model(&mut self) -> Result<Arc<Model>> {
        if self.model.is_none() {
            let m = Model::load(&self.cfg.model.archive, self.cfg.model_config()?)?;
            self.model = Some(Arc::new(m));
        }
        Ok(Arc::clone(self.model.as_ref().expect("just loaded")))
    }

    fn tokenizer(&mut self) -> Result<Arc<Tokenizer>> {
        if self.tokenizer.is_none() {
            let t = Tokenizer::load(&self.cfg.tokenizer.vocab, &self.cfg.tokenizer.merges)?;
            self.tokenizer = Some(Arc::new(t));
        }
        Ok(Arc::clone(self.tokenizer.as_ref().expect("just loaded")))
    }

    fn lexicon(&self) -> Result<Lexicon> {
        match (&self.cfg.suites.lexicon, &self.cfg.suites.templates) {
            (Some(l), Some(t)) => Lexicon::load(l, t),
            _ => Ok(Lexicon::builtin()),
        }
    }

    pub fn gen_suites(&mut self) -> Result<Vec<TestSuite>> {
        let lexicon = self.lexicon()?;
        let cfg = self.cfg.clone();
        self.bundle.run_stage(Stage::GenSuites, |b| {
            let mut suites = Vec::new();
            let mut summaries = Vec::new();
            for (kind, size, fraction) in [
                (SuiteKind::Lexical, cfg.suites.lexical_size, cfg.suites.lexical_subsample),
                (SuiteKind::Contextual, cfg.suites.contextual_size, cfg.suites.contextual_subsample),
            ] {
                let full = generate_suite(&lexicon, kind, cfg.seeds.suite, size)?;
                let mut suite = full.subsample(fraction, cfg.seeds.subsample)?;
                if let Some(n) = cfg.suites.max_per_phenomenon {
                    suite = suite.truncate_per_phenomenon(n);
                }
                let mut bytes = Vec::new();
                suite.write_jsonl(&mut bytes)?;
                b.write(Stage::GenSuites, &suite_file(kind), &bytes)?;
                summaries.push(SuiteSummary {
                    kind,
                    generated: full.pairs.len(),
                    kept: suite.pairs.len(),
                    counts: suite.counts().into_iter().map(|(p, n)| (p.code().to_string(), n)).collect(),
                });
                log::info!("{} suite: kept {} of {} pairs", kind.name(), suite.pairs.len(), full.pairs.len());
                suites.push(suite);
            }
            b.write(Stage::GenSuites, SUITE_SUMMARY_FILE, &pretty(&summaries))?;
            Ok(suites)
        })
    }

    pub fn train_probe(&mut self) -> Result<Probe> {
        let model = self.model()?;
        let tokenizer = self.tokenizer()?;
        let cfg = self.cfg.clone();
        let exec = &self.exec;
        self.bundle.run_stage(Stage::TrainProbe, |b| {
            let probe = match &cfg.probe.path {
                Some(path) => {
                    let p = Probe::load(path)?;
                    if p.dim() != model.config().d_model {
                        return Err(Error::Config(format!(
                            "probe at {} has dimension {}, model has {}",
                            path.display(),
                            p.dim(),
                            model.config().d_model
                        )));
                    }
                    p
                }
                None => {
                    let corpus = generate_probe_corpus(&ProbeCorpusBank::builtin(), cfg.seeds.probe, cfg.probe.corpus_size)?;
                    let mut bytes = Vec::new();
                    for s in &corpus {
                        bytes.extend(serde_json::to_vec(s).expect("sentence serializes"));
                        bytes.push(b'\n');
                    }
                    b.write(Stage::TrainProbe, PROBE_CORPUS_FILE, &bytes)?;
                    let reps = extract_representations(&model, &tokenizer, &corpus, exec)?;
                    let mut probe = train_probe(&reps, cfg.seeds.probe, &cfg.probe.hyper)?;
                    if cfg.probe.shuffled_baseline {
                        let shuffled = reps.with_shuffled_labels(cfg.seeds.probe.wrapping_add(SHUFFLE_SEED_OFFSET));
                        match train_probe(&shuffled, cfg.seeds.probe, &cfg.probe.hyper) {
                            Ok(p) => probe.meta.shuffled_label_accuracy = Some(p.meta.validation_accuracy),
                            Err(e) => log::warn!("shuffled-label baseline failed: {e}"),
                        }
                    }
                    log::info!(
                        "probe: held-out accuracy {:.4} ({} validation sentences)",
                        probe.meta.validation_accuracy,
                        probe.meta.n_validation
                    );
                    probe
                }
            };
            let dir = b.path(PROBE_DIR);
            probe.save(&dir)?;
            b.record(Stage::TrainProbe, &format!("{PROBE_DIR}/{}", crate::probe::PROBE_MANIFEST))?;
            b.record(Stage::TrainProbe, &format!("{PROBE_DIR}/{}", crate::probe::PROBE_WEIGHTS))?;
            Ok(probe)
        })
    }

    fn read_suite(&self, kind: SuiteKind) -> Result<TestSuite> {
        let path = self.bundle.path(&suite_file(kind));
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        TestSuite::read_jsonl(kind, self.cfg.seeds.suite, BufReader::new(f))
    }

    /// Patch every pair at every layer in each configured mode.
    pub fn sweep(&mut self) -> Result<EffectSet> {
        let model = self.model()?;
        let tokenizer = self.tokenizer()?;
        let modes = self.cfg.analysis.modes.clone();
        let mut suites = Vec::new();
        for kind in [SuiteKind::Lexical, SuiteKind::Contextual] {
            let m = suite_modes(kind, &modes);
            if !m.is_empty() {
                suites.push((self.read_suite(kind).map_err(|e| e.in_stage("sweep"))?, m));
            }
        }
        let exec = &self.exec;
        self.bundle.run_stage(Stage::Sweep, |b| {
            let probe = Probe::load(&b.path(PROBE_DIR))?;
            let tasks: Vec<(SuiteKind, &crate::datagen::TestPair, &[PositionMode])> = suites
                .iter()
                .flat_map(|(s, m)| s.pairs.iter().map(move |p| (s.kind, p, m.as_slice())))
                .collect();
            let done = AtomicUsize::new(0);
            let step = (tasks.len() / 10).max(1);
            let sweeps = exec.try_map(&tasks, |&(kind, pair, modes)| {
                let prepared = PreparedPair::new(&model, &probe, &tokenizer, pair)?;
                let per_mode = modes
                    .iter()
                    .map(|&m| Ok((m, layer_sweep(&model, &probe, &prepared, m)?)))
                    .collect::<Result<Vec<_>>>()?;
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                if n.is_multiple_of(step) {
                    log::info!("sweep: {n}/{} pairs", tasks.len());
                }
                Ok(PairSweep::new(kind, pair, &prepared, per_mode))
            })?;
            let (pairs_csv, effects_csv) = effects::write_csv(&sweeps)?;
            b.write(Stage::Sweep, effects::PAIRS_CSV, &pairs_csv)?;
            b.write(Stage::Sweep, effects::EFFECTS_CSV, &effects_csv)?;
            EffectSet::from_sweeps(model.n_layers(), &sweeps)
        })
    }

    /// Effect tensors as persisted by the sweep.
    pub fn load_effects(&self) -> Result<EffectSet> {
        load_effects(&self.bundle, self.cfg.model_config()?.n_layers)
    }

    pub fn analyze(&mut self) -> Result<MetricReport> {
        let n_layers = self.cfg.model_config()?.n_layers;
        let acfg = self.cfg.analysis_config();
        self.bundle.run_stage(Stage::Analyze, |b| {
            let set = load_effects(b, n_layers)?;
            let mut report = analyze_effects(&set, &acfg)?;
            let probe = Probe::load(&b.path(PROBE_DIR))?;
            report.notes.push(probe_note(&probe));
            b.write(Stage::Analyze, METRICS_FILE, report.to_canonical_json().as_bytes())?;
            Ok(report)
        })
    }

    pub fn report(&mut self, formats: &[ReportFormat]) -> Result<Vec<String>> {
        emit_into(&mut self.bundle, formats)
    }

    /// Run one stage.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::GenSuites => self.gen_suites().map(drop),
            Stage::TrainProbe => self.train_probe().map(drop),
            Stage::Sweep => self.sweep().map(drop),
            Stage::Analyze => self.analyze().map(drop),
            Stage::Report => self.report(&ReportFormat::ALL).map(drop),
        }
    }

    /// Every stage in order, skipping those already complete and intact.
    pub fn run_all(&mut self) -> Result<MetricReport> {
        for stage in Stage::ALL {
            let mut upto = stage.prerequisites().to_vec();
            upto.push(stage);
            if self.bundle.diff(&upto).is_empty() {
                log::info!("{stage}: already complete");
                continue;
            }
            log::info!("{stage}: running");
            self.run_stage(stage)?;
        }
        if !self.bundle.manifest().complete {
            return Err(Error::Bundle(format!(
                "bundle {} did not verify:\n  {}",
                self.bundle.root().display(),
                self.bundle.diff(&Stage::ALL).join("\n  ")
            )));
        }
        read_report(&self.bundle)
    }
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

fn probe_note(p: &Probe) -> String {
    let m = &p.meta;
    let baseline = m
        .shuffled_label_accuracy
        .map_or_else(String::new, |a| format!("; shuffled-label baseline {a:.4}"));
    format!(
        "probe: logistic regression on final-layer last-token states, trained on a regenerated template corpus \
         ({} train / {} held-out sentences); held-out accuracy {:.4}{baseline}",
        m.n_train, m.n_validation, m.validation_accuracy
    )
}

pub fn load_effects(bundle: &Bundle, n_layers: usize) -> Result<EffectSet> {
    let read = |rel: &str| {
        let p = bundle.path(rel);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    effects::read_csv(n_layers, &read(effects::PAIRS_CSV)?, &read(effects::EFFECTS_CSV)?)
}

pub fn analyze_effects(set: &EffectSet, cfg: &crate::metrics::AnalysisConfig) -> Result<MetricReport> {
    analyze(
        AnalysisInputs {
            lexical_target: set.lexical_target.as_ref(),
            lexical_control: set.lexical_control.as_ref(),
            contextual: set.contextual.as_ref(),
        },
        cfg,
    )
}

fn read_report(bundle: &Bundle) -> Result<MetricReport> {
    let p = bundle.path(METRICS_FILE);
    MetricReport::from_json(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
}

fn emit_into(bundle: &mut Bundle, formats: &[ReportFormat]) -> Result<Vec<String>> {
    bundle.run_stage(Stage::Report, |b| {
        let report = read_report(b)?;
        let mut written = Vec::new();
        let mut put = |b: &mut Bundle, rel: String, bytes: &[u8]| {
            b.write(Stage::Report, &rel, bytes)?;
            written.push(rel);
            Ok::<_, Error>(())
        };
        let figs = figures::figures(&report);
        for &f in formats {
            match f {
                ReportFormat::Json => put(b, format!("{REPORT_DIR}/{METRICS_FILE}"), report.to_canonical_json().as_bytes())?,
                ReportFormat::Csv => {
                    for fig in &figs {
                        put(b, format!("{REPORT_DIR}/{}.csv", fig.name), &fig.to_csv())?;
                    }
                    if let Some(t) = figures::phenomena_csv(&report) {
                        put(b, format!("{REPORT_DIR}/phenomena.csv"), &t)?;
                    }
                    put(b, format!("{REPORT_DIR}/verdicts.csv"), &figures::verdicts_csv(&report))?;
                }
                ReportFormat::Svg => {
                    for fig in &figs {
                        put(b, format!("{REPORT_DIR}/{}.svg", fig.name), fig.to_svg().as_bytes())?;
                    }
                }
            }
        }
        Ok(written)
    })
}

/// Render figures and tables for a bundle whose analysis is complete.
///
/// Returns bundle-relative paths written. Refuses, listing the manifest
/// differences, when an earlier stage is missing or its files changed.
pub fn emit_report(bundle_root: &Path, formats: &[ReportFormat]) -> Result<Vec<String>> {
    let mut b = Bundle::open(bundle_root)?;
    b.require(Stage::Report.prerequisites())?;
    emit_into(&mut b, formats)
}

/// Outcome of a full run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub bundle: PathBuf,
    pub report: MetricReport,
}

/// Run every stage into `cfg.run.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut r = Runner::new(cfg.clone(), false)?;
    let report = r.run_all()?;
    Ok(RunOutcome {
        bundle: cfg.run.output.clone(),
        report,
    })
}
