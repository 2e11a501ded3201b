// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use patchlab::metrics::{MetricReport, Status};
use patchlab::runner::bundle::{Bundle, Stage, StageStatus};
use patchlab::runner::{emit_report, ExperimentConfig, ReportFormat, Runner};

#[derive(Parser)]
#[command(name = "patchlab", version, about = "Layer-wise activation patching of GPT-2 sentiment processing")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Bundle directory; overrides `run.output`.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads, 0 for all cores; overrides `run.workers`.
    #[arg(short, long, global = true)]
    workers: Option<usize>,
    /// Override any config value, e.g. `--set suites.contextual_subsample=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and subsample the lexical and contextual suites.
    GenSuites,
    /// Train the sentiment probe (or import `probe.path`).
    TrainProbe,
    /// Patch every pair at every layer.
    Sweep,
    /// Compute metrics and hypothesis verdicts from the stored effects.
    Analyze,
    /// Write figure tables and SVGs for an analyzed bundle.
    Report {
        /// Comma-separated subset of json, csv, svg.
        #[arg(long, value_delimiter = ',', default_value = "json,csv,svg")]
        format: Vec<String>,
    },
    /// Run every stage, skipping those already complete.
    All {
        /// Discard an existing bundle in the output directory, even one from another config.
        #[arg(long)]
        reset: bool,
    },
}

fn overrides(g: &Global) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &g.set {
        let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_deref().ok_or_else(|| anyhow!("--config is required for this command"))?;
    let mut cfg = ExperimentConfig::load_with(path, &overrides(g)?)
        .with_context(|| format!("loading {}", path.display()))?;
    if let Some(o) = &g.output {
        cfg.run.output = o.clone();
    }
    if let Some(w) = g.workers {
        cfg.run.workers = w;
    }
    Ok(cfg)
}

fn print_verdicts(r: &MetricReport) {
    for v in &r.verdicts {
        let status = match v.status {
            Status::Supported => "SUPPORTED",
            Status::Falsified => "FALSIFIED",
            Status::Undetermined => "UNDETERMINED",
        };
        println!("{:<7} {:<12} {}  [{}]", v.id, status, v.observed, v.criterion);
    }
}

fn print_progress(root: &Path) -> Result<bool> {
    let b = Bundle::open(root)?;
    let pending: Vec<&str> = Stage::ALL
        .iter()
        .filter(|&&s| b.status(s) != StageStatus::Complete)
        .map(|s| s.name())
        .collect();
    if b.manifest().complete {
        println!("bundle complete: {}", root.display());
    } else {
        println!("bundle {} incomplete; remaining stages: {}", root.display(), pending.join(", "));
    }
    Ok(b.manifest().complete)
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    match cli.command {
        Command::Report { format } => {
            let formats = format
                .iter()
                .map(|f| f.parse::<ReportFormat>())
                .collect::<patchlab::Result<Vec<_>>>()?;
            let root = match (&g.output, &g.config) {
                (Some(o), _) => o.clone(),
                (None, Some(_)) => load_config(g)?.run.output,
                (None, None) => bail!("give --output <bundle> or --config"),
            };
            for f in emit_report(&root, &formats)? {
                println!("{}", root.join(f).display());
            }
            print_progress(&root)
        }
        Command::All { reset } => {
            let cfg = load_config(g)?;
            let root = cfg.run.output.clone();
            let mut r = Runner::new(cfg, reset)?;
            let report = r.run_all()?;
            print_verdicts(&report);
            print_progress(&root)
        }
        stage => {
            let stage = match stage {
                Command::GenSuites => Stage::GenSuites,
                Command::TrainProbe => Stage::TrainProbe,
                Command::Sweep => Stage::Sweep,
                Command::Analyze => Stage::Analyze,
                Command::Report { .. } | Command::All { .. } => unreachable!("handled above"),
            };
            let cfg = load_config(g)?;
            let root = cfg.run.output.clone();
            let mut r = Runner::new(cfg, false)?;
            if stage == Stage::Analyze {
                print_verdicts(&r.analyze()?);
            } else {
                r.run_stage(stage)?;
            }
            print_progress(&root)?;
            // A single stage succeeded even though later ones remain.
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
