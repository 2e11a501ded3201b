// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance checks, one PASS / FAIL / SKIP line each.
//!
//! Checks that need the converted GPT-2 small archive run only when
//! `PATCHLAB_GPT2_ARCHIVE` names it. Forward parity also needs reference
//! outputs: `PATCHLAB_GPT2_GOLDEN`, or `golden.json` beside the archive
//! (see `scripts/make_gpt2_golden.py`). Full-run bundles go to
//! `PATCHLAB_ACCEPTANCE_OUT` if set, else a temporary directory.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use patchlab::datagen::{generate_contextual_suite, generate_probe_corpus, Lexicon, ProbeCorpusBank, TestPair};
use patchlab::metrics::{evaluate_hypotheses, published_reference, Band, MetricReport, Status};
use patchlab::model::{Model, ModelConfig};
use patchlab::patching::{run_with_patch, PatchSpec, PositionMode};
use patchlab::probe::logistic_loss_and_grad;
use patchlab::runner::{ExperimentConfig, Runner};
use patchlab::tokenizer::Tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

#[derive(Default)]
struct Tally {
    pass: usize,
    fail: usize,
    skip: usize,
}

impl Tally {
    fn check(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Result<String, String>) {
        let start = Instant::now();
        let out = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let t = start.elapsed();
        let (ok, detail) = match out {
            Ok(d) if t <= limit => (true, d),
            Ok(d) => (false, format!("{d}; took {t:.1?}, limit {limit:.0?}")),
            Err(e) => (false, e),
        };
        if ok {
            self.pass += 1;
        } else {
            self.fail += 1;
        }
        println!("{} {name}: {detail} [{t:.2?}]", if ok { "PASS" } else { "FAIL" });
    }

    fn skip(&mut self, name: &str, why: &str) {
        self.skip += 1;
        println!("SKIP {name}: {why}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tokenizer_parity() -> Result<String, String> {
    #[derive(Deserialize)]
    struct Case {
        text: String,
        ids: Vec<u32>,
    }
    let dir = common::assets().join("gpt2");
    let tok = Tokenizer::load(dir.join("encoder.json"), dir.join("vocab.bpe")).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.join("tokenizer_golden.jsonl")).map_err(|e| e.to_string())?;
    let cases: Vec<Case> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    ensure(cases.len() >= 200, || format!("only {} golden cases", cases.len()))?;
    let bad: Vec<&str> = cases
        .iter()
        .filter(|c| tok.encode(&c.text).ids != c.ids)
        .map(|c| c.text.as_str())
        .collect();
    ensure(bad.is_empty(), || format!("{} of {} differ, first {:?}", bad.len(), cases.len(), bad[0]))?;
    Ok(format!("{}/{} reference encodings reproduced exactly", cases.len(), cases.len()))
}

fn sentences(n: usize) -> Vec<Vec<u32>> {
    let tok = common::tokenizer();
    generate_probe_corpus(&ProbeCorpusBank::builtin(), 31, 200)
        .unwrap()
        .into_iter()
        .take(n)
        .map(|s| tok.encode(&s.text).ids)
        .collect()
}

fn self_patch(model: &Model) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checks = 0;
    for ids in sentences(20) {
        let (logits, cache) = model.forward(&ids).map_err(|e| e.to_string())?;
        for layer in 0..model.n_layers() {
            let p = rng.gen_range(0..ids.len());
            for spec in [PatchSpec::all(layer), PatchSpec::mapped(layer, vec![(p, p)])] {
                let (patched, _) = run_with_patch(model, &ids, &cache, &spec).map_err(|e| e.to_string())?;
                ensure(patched == logits, || format!("layer {layer} logits differ for {ids:?}"))?;
                checks += 1;
            }
        }
    }
    Ok(format!("20 sentences x {} layers, {checks} patched runs bit-identical", model.n_layers()))
}

fn equal_length_pairs(n: usize) -> Vec<TestPair> {
    let tok = common::tokenizer();
    generate_contextual_suite(&Lexicon::builtin(), 21, 700)
        .unwrap()
        .pairs
        .into_iter()
        .filter(|p| tok.encode(&p.clean).len() == tok.encode(&p.corrupted).len())
        .take(n)
        .collect()
}

fn final_layer_patch(model: &Model) -> Result<String, String> {
    let tok = common::tokenizer();
    let last = model.n_layers() - 1;
    let pairs = equal_length_pairs(20);
    ensure(pairs.len() == 20, || "fewer than 20 equal-length pairs".into())?;
    for pair in &pairs {
        let clean = tok.encode(&pair.clean).ids;
        let corrupted = tok.encode(&pair.corrupted).ids;
        let (source, cache) = model.forward(&corrupted).map_err(|e| e.to_string())?;
        let (patched, _) = run_with_patch(model, &clean, &cache, &PatchSpec::all(last)).map_err(|e| e.to_string())?;
        ensure(patched == source, || format!("pair {} differs from the source run", pair.id))?;
    }
    Ok(format!("20 pairs, layer {last} all positions reproduce source logits exactly"))
}

fn metric_oracle() -> Result<String, String> {
    for seed in 0..1000 {
        common::oracle::check_against_oracle(seed);
    }
    Ok(format!("1000 random tensors (<= 5 pairs x 12 layers) agree to {:e} relative", common::oracle::REL))
}

fn gradient_check() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0f64;
    for _ in 0..50 {
        let dim = rng.gen_range(2..12);
        let n = rng.gen_range(3..25);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect())
            .collect();
        let ys: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let b: f64 = rng.sample(StandardNormal);
        let l2 = rng.gen_range(0.0..0.1);
        let (_, gw, gb) = logistic_loss_and_grad(&w, b, &xs, &ys, l2);
        let h = 1e-6;
        let loss = |w: &[f64], b: f64| logistic_loss_and_grad(w, b, &xs, &ys, l2).0;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for k in 0..dim {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[k] += h;
            wm[k] -= h;
            worst = worst.max(rel(gw[k], (loss(&wp, b) - loss(&wm, b)) / (2.0 * h)));
        }
        worst = worst.max(rel(gb, (loss(&w, b + h) - loss(&w, b - h)) / (2.0 * h)));
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:.2e}"))?;
    Ok(format!("50 instances, worst relative error {worst:.2e}"))
}

fn hypothesis_engine() -> Result<String, String> {
    let verdicts = evaluate_hypotheses(&published_reference()).map_err(|e| e.to_string())?;
    let got: Vec<(String, Status)> = verdicts.iter().map(|v| (v.id.clone(), v.status)).collect();
    let want: Vec<Status> = [Status::Supported; 4].into_iter().chain([Status::Falsified; 3]).collect();
    ensure(got.iter().map(|g| g.1).eq(want), || format!("{got:?}"))?;
    Ok("published statistics: H-Lex1-4 SUPPORTED, H-Ctx1-3 FALSIFIED".into())
}

#[derive(Deserialize)]
struct Golden {
    cases: Vec<GoldenCase>,
}

#[derive(Deserialize)]
struct GoldenCase {
    ids: Vec<u32>,
    stride: usize,
    logits: Vec<Vec<f64>>,
}

fn forward_parity(model: &Model, golden: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    let g: Golden = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    for c in &g.cases {
        let (logits, _) = model.forward(&c.ids).map_err(|e| e.to_string())?;
        for (pos, row) in c.logits.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                worst = worst.max((f64::from(logits[[pos, j * c.stride]]) - want).abs());
            }
        }
    }
    ensure(worst < 1e-2, || format!("max |logit diff| {worst:.3e}"))?;
    Ok(format!("{} prompts, max |logit diff| {worst:.3e}", g.cases.len()))
}

fn lexical_checks(r: &MetricReport) -> Result<String, String> {
    let lex = r.lexical.as_ref().ok_or("no lexical metrics")?;
    ensure(lex.n_pairs >= 200, || format!("{} lexical pairs", lex.n_pairs))?;
    let b = &lex.band_sensitivity;
    let (e, m, l) = (b.early.unwrap_or(f64::NAN), b.mid.unwrap_or(f64::NAN), b.late.unwrap_or(f64::NAN));
    let spec = lex.specificity.as_ref().ok_or("no specificity")?;
    let var = lex.band_variability.as_ref().ok_or("no variability")?;
    let (ve, vl) = (var.early.unwrap_or(f64::NAN), var.late.unwrap_or(f64::NAN));
    let a = e > m && e > l;
    let bb = spec.mean > 0.0 && spec.p_value < 0.01;
    let c = ve < vl;
    let detail = format!(
        "{} pairs; (a) sensitivity early {e:.4} mid {m:.4} late {l:.4} {}; (b) specificity {:.4} p {:.2e} {}; (c) variability early {ve:.4} late {vl:.4} {}",
        lex.n_pairs,
        mark(a),
        spec.mean,
        spec.p_value,
        mark(bb),
        mark(c)
    );
    ensure(a && bb && c, || detail.clone())?;
    Ok(detail)
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "DIVERGES"
    }
}

fn contextual_checks(r: &MetricReport) -> Result<String, String> {
    let ctx = r.contextual.as_ref().ok_or("no contextual metrics")?;
    ensure(ctx.n_pairs >= 400, || format!("{} contextual pairs", ctx.n_pairs))?;
    let middle = r.peaks_in(Band { first: 4, last: 7 }).unwrap_or(0);
    let [e, m, l] = ctx.band_shares;
    let a = middle <= 1;
    let b = ctx.convergence_fraction >= 0.6;
    let c = l > m && m > e && l >= 0.40;
    let detail = format!(
        "{} pairs; (a) {middle} phenomena peak in 4-7 {}; (b) convergence {:.2} {}; (c) shares {e:.3}/{m:.3}/{l:.3} {}",
        ctx.n_pairs,
        mark(a),
        ctx.convergence_fraction,
        mark(b),
        mark(c)
    );
    if a && b && c {
        return Ok(detail);
    }
    // A divergent measurement still passes if the verdicts faithfully report it.
    let t = &r.thresholds;
    let n = ctx.phenomena.len() as f64;
    let in_window = r.peaks_in(t.middle_window).unwrap_or(0) as f64;
    let expect = [
        ("H-Ctx1", in_window / n >= t.middle_fraction),
        ("H-Ctx2", ctx.convergence_fraction < t.convergence_below),
        ("H-Ctx3", ctx.band_shares.iter().all(|&s| s <= t.max_band_share)),
    ];
    for (id, supported) in expect {
        let v = r.verdict(id).ok_or_else(|| format!("no verdict {id}"))?;
        let want = if supported { Status::Supported } else { Status::Falsified };
        ensure(v.status == want || v.status == Status::Undetermined, || {
            format!("{detail}; verdict {id} is {:?}, measurement implies {want:?}", v.status)
        })?;
    }
    Ok(format!("{detail}; divergence reported faithfully by the verdicts"))
}

fn out_dir(name: &str, tmp: &Path) -> PathBuf {
    std::env::var_os("PATCHLAB_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.to_path_buf())
        .join(name)
}

fn gpt2_checks(t: &mut Tally, archive: &Path) {
    let model = match Model::load(archive, ModelConfig::gpt2_small()) {
        Ok(m) => m,
        Err(e) => {
            t.check("GPT-2 archive loads", Duration::MAX, || Err(e.to_string()));
            return;
        }
    };
    let golden = std::env::var_os("PATCHLAB_GPT2_GOLDEN").map(PathBuf::from).unwrap_or_else(|| {
        let dir = if archive.is_dir() { archive.to_path_buf() } else { archive.parent().unwrap().to_path_buf() };
        dir.join("golden.json")
    });
    if golden.exists() {
        t.check("forward-pass parity (GPT-2 117M)", Duration::from_secs(60), || forward_parity(&model, &golden));
    } else {
        t.skip("forward-pass parity (GPT-2 117M)", &format!("no reference outputs at {}", golden.display()));
    }
    t.check("self-patch identity (GPT-2 117M)", Duration::from_secs(300), || self_patch(&model));
    t.check("full-final-layer patch equivalence (GPT-2 117M)", Duration::from_secs(120), || final_layer_patch(&model));
    drop(model);

    let tmp = tempfile::tempdir().unwrap();
    let base = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/gpt2-small.toml"))
        .expect("configs/gpt2-small.toml");
    let mut lex_cfg = base.clone();
    lex_cfg.model.archive = archive.to_path_buf();
    lex_cfg.analysis.modes = vec![PositionMode::TargetWords, PositionMode::ControlWords];
    lex_cfg.run.output = out_dir("lexical", tmp.path());
    let mut lexical = match Runner::new(lex_cfg, true) {
        Ok(r) => r,
        Err(e) => return t.check("lexical run", Duration::MAX, || Err(e.to_string())),
    };
    if let Err(e) = lexical.gen_suites() {
        return t.check("suite generation", Duration::MAX, || Err(e.to_string()));
    }
    t.check("probe accuracy >= 90% held-out", Duration::from_secs(600), || {
        let p = lexical.train_probe().map_err(|e| e.to_string())?;
        let acc = p.meta.validation_accuracy;
        let detail = format!(
            "{acc:.4} on {} held-out sentences (shuffled labels {:?})",
            p.meta.n_validation, p.meta.shuffled_label_accuracy
        );
        ensure(acc >= 0.90, || detail.clone())?;
        Ok(detail)
    });
    t.check("lexical results (a)-(c)", Duration::from_secs(900), || {
        lexical.sweep().map_err(|e| e.to_string())?;
        lexical_checks(&lexical.analyze().map_err(|e| e.to_string())?)
    });

    let mut ctx_cfg = base;
    ctx_cfg.model.archive = archive.to_path_buf();
    ctx_cfg.analysis.modes = vec![PositionMode::All];
    ctx_cfg.probe.path = Some(lexical.bundle().path("probe"));
    ctx_cfg.run.output = out_dir("contextual", tmp.path());
    t.check("contextual results (a)-(c)", Duration::from_secs(1800), || {
        let mut r = Runner::new(ctx_cfg, true).map_err(|e| e.to_string())?;
        let report = r.run_all().map_err(|e| e.to_string())?;
        contextual_checks(&report)
    });
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let mut t = Tally::default();
    t.check("tokenizer golden parity", Duration::from_secs(1), tokenizer_parity);
    let fixture = common::fixture_model();
    t.check("self-patch identity (fixture)", Duration::from_secs(60), || self_patch(fixture));
    t.check("full-final-layer patch equivalence (fixture)", Duration::from_secs(120), || {
        final_layer_patch(fixture)
    });
    t.check("metric oracle equivalence", Duration::from_secs(10), metric_oracle);
    t.check("probe gradient check", Duration::from_secs(5), gradient_check);
    t.check("hypothesis engine on published statistics", Duration::from_secs(1), hypothesis_engine);
    match common::gpt2_archive() {
        Some(a) => gpt2_checks(&mut t, &a),
        None => {
            for name in [
                "forward-pass parity (GPT-2 117M)",
                "probe accuracy >= 90% held-out",
                "lexical results (a)-(c)",
                "contextual results (a)-(c)",
            ] {
                t.skip(name, "set PATCHLAB_GPT2_ARCHIVE to a converted GPT-2 small archive");
            }
        }
    }
    println!("acceptance: {} passed, {} failed, {} skipped", t.pass, t.fail, t.skip);
    if t.fail == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
